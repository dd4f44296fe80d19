"""Replicated service discovery registry with leases, pluggable storage and XDR/UDP push replication."""

from griddisc.model import Lease, QueryFilter, ServiceRecord, VersionStamp
from griddisc.registry import Registry
from griddisc.storage import BackendDescriptor, BackendKind, open_store

__all__ = [
    "BackendDescriptor",
    "BackendKind",
    "Lease",
    "QueryFilter",
    "Registry",
    "ServiceRecord",
    "VersionStamp",
    "open_store",
]
