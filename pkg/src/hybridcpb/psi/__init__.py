"""Two-party semi-honest private set intersection protocols."""

from .groups import Ed25519Group, Group, GroupError, ModPGroup, group_by_name
from .protocols import (
    MutualOutcome,
    ProtocolAbort,
    PsiCaClient,
    PsiCaServer,
    PsiDtClient,
    PsiDtServer,
    PsiOutcome,
    mutual_psi_ca,
    mutual_psi_dt,
    psi_ca,
    psi_dt,
    run_in_process,
    run_over_socket,
)

__all__ = [
    "Ed25519Group",
    "Group",
    "GroupError",
    "ModPGroup",
    "group_by_name",
    "MutualOutcome",
    "ProtocolAbort",
    "PsiCaClient",
    "PsiCaServer",
    "PsiDtClient",
    "PsiDtServer",
    "PsiOutcome",
    "mutual_psi_ca",
    "mutual_psi_dt",
    "psi_ca",
    "psi_dt",
    "run_in_process",
    "run_over_socket",
]
