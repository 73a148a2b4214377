from .cross_association import CoClustering, VictimAttackerMatrix, codelength, cross_associate
from .freudiger import PairSelection, candidate_pairs, select_pairs
from .soldo import candidate_pools, nearest_victims, ts_ca_knn_predict, ts_ca_predict, ts_predict

__all__ = [
    "CoClustering",
    "PairSelection",
    "VictimAttackerMatrix",
    "candidate_pairs",
    "candidate_pools",
    "codelength",
    "cross_associate",
    "nearest_victims",
    "select_pairs",
    "ts_ca_knn_predict",
    "ts_ca_predict",
    "ts_predict",
]
