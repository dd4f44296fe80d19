"""Single-node registry semantics over any :class:`~griddisc.storage.Store`.

Every operation takes ``now`` (microseconds since the epoch) from the caller;
the daemon passes the real clock and tests pass a fake one.

Mutations are serialized by one lock per registry. Reads go straight to the
store, whose scan is a snapshot. Listeners registered with
:meth:`Registry.add_listener` see every local mutation after it has been
committed and after the lock is released; remote applies are not reported.
"""

from __future__ import annotations

import logging
import threading
import uuid
from typing import Callable, Iterable, Mapping, Optional

from griddisc.errors import InvalidKey, InvalidRecord, InvalidServerUrl, NotFound
from griddisc.model import (
    MICROS,
    Lease,
    QueryFilter,
    ServiceRecord,
    VersionStamp,
    check_lease_secs,
    normalize_attributes,
    sort_key,
)
from griddisc.storage import Store
from griddisc.wire import MAX_DATAGRAM, record_wire_size

logger = logging.getLogger(__name__)

DEFAULT_TOMBSTONE_WINDOW_SECS = 3600

Listener = Callable[[ServiceRecord], None]


def random_service_id() -> str:
    return str(uuid.uuid4())


class Registry:
    def __init__(
        self,
        store: Store,
        node_id: bytes,
        tombstone_window_secs: int = DEFAULT_TOMBSTONE_WINDOW_SECS,
        id_factory: Callable[[], str] = random_service_id,
    ):
        if len(node_id) != 16:
            raise ValueError("node_id must be 16 bytes")
        self.store = store
        self.node_id = node_id
        self.tombstone_window_secs = tombstone_window_secs
        self._id_factory = id_factory
        self._lock = threading.RLock()
        self._listeners: list[Listener] = []

    def add_listener(self, listener: Listener) -> None:
        self._listeners.append(listener)

    def _notify(self, records: Iterable[ServiceRecord]) -> None:
        for record in records:
            for listener in self._listeners:
                try:
                    listener(record)
                except Exception:
                    logger.exception("mutation listener failed for %s", record.service_id)

    def _stamp(self, now: int, current: Optional[ServiceRecord]) -> VersionStamp:
        return VersionStamp(now, self.node_id).successor_of(current.stamp if current else None)

    # -- mutations ---------------------------------------------------------

    def register(
        self,
        name: str,
        server_url: str,
        methods: Iterable[str] = (),
        attributes: Mapping[str, str] | Iterable[tuple[str, str]] | None = None,
        *,
        lease_secs: int,
        now: int,
    ) -> ServiceRecord:
        if not isinstance(name, str) or not name:
            raise InvalidRecord("service name must be non-empty text")
        if not isinstance(server_url, str):
            raise InvalidRecord("server_url must be text")
        methods = tuple(methods)
        if not all(isinstance(m, str) for m in methods):
            raise InvalidRecord("method names must be text")
        attrs = normalize_attributes(attributes)
        lease = Lease.grant(now, check_lease_secs(lease_secs))
        with self._lock:
            service_id = self._id_factory()
            while self.store.get(service_id) is not None:
                service_id = self._id_factory()
            record = ServiceRecord(
                service_id, name, server_url, methods, attrs, lease, VersionStamp(now, self.node_id)
            )
            size = record_wire_size(record)
            if size > MAX_DATAGRAM:
                raise InvalidRecord(f"record encodes to {size} bytes, limit is {MAX_DATAGRAM}")
            self.store.put(record)
        self._notify([record])
        return record

    def renew(self, service_id: str, lease_secs: int, now: int) -> Lease:
        lease = Lease.grant(now, check_lease_secs(lease_secs))
        with self._lock:
            current = self.store.get(service_id)
            if current is None or not current.live(now):
                raise NotFound(f"no live service {service_id}")
            record = ServiceRecord(
                current.service_id,
                current.name,
                current.server_url,
                current.methods,
                current.attributes,
                lease,
                self._stamp(now, current),
            )
            self.store.put(record)
        self._notify([record])
        return lease

    def deregister(self, service_id: str, now: int) -> bool:
        """Tombstone the record. Unknown or already-deleted ids are a no-op (False)."""
        with self._lock:
            current = self.store.get(service_id)
            if current is None or current.tombstone:
                return False
            record = current.as_tombstone(self._stamp(now, current))
            self.store.put(record)
        self._notify([record])
        return True

    def sweep_expired(self, now: int) -> int:
        """Tombstone every expired record and purge tombstones past the window."""
        horizon = now - self.tombstone_window_secs * MICROS
        expired = []
        with self._lock:
            for record in self.store.scan():
                if record.tombstone:
                    if record.stamp.wall_micros <= horizon:
                        self.store.delete(record.service_id)
                elif record.lease.expired(now):
                    tomb = record.as_tombstone(self._stamp(now, record))
                    self.store.put(tomb)
                    expired.append(tomb)
        self._notify(expired)
        return len(expired)

    # -- remote state, last writer wins --------------------------------------

    def apply_upsert(self, record: ServiceRecord) -> bool:
        with self._lock:
            current = self.store.get(record.service_id)
            if current is not None and record.stamp <= current.stamp:
                return False
            self.store.put(record)
            return True

    def apply_delete(self, service_id: str, stamp: VersionStamp) -> bool:
        with self._lock:
            current = self.store.get(service_id)
            if current is not None and stamp <= current.stamp:
                return False
            if current is None:
                # placeholder keeps the stamp so a late, older UPSERT loses
                tomb = ServiceRecord(service_id, "", "", (), (), Lease.grant(stamp.wall_micros, 1), stamp, True)
            else:
                tomb = current.as_tombstone(stamp)
            self.store.put(tomb)
            return True

    # -- queries -------------------------------------------------------------

    def get(self, service_id: str) -> Optional[ServiceRecord]:
        """The stored version of a record, tombstones and expired leases included."""
        return self.store.get(service_id)

    def records(self) -> list[ServiceRecord]:
        return list(self.store.scan())

    def find(self, query: QueryFilter, now: int) -> list[ServiceRecord]:
        hits = [r for r in self.store.scan() if r.live(now) and query.matches(r)]
        hits.sort(key=sort_key)
        return hits

    def find_key(self, key: str, value: Optional[str] = None, *, now: int) -> list[ServiceRecord]:
        if not isinstance(key, str) or not key:
            raise InvalidKey("key must be non-empty text")
        return self.find(QueryFilter(required_attrs=((key, value),)), now)

    def find_server(self, server_url: str, now: int) -> list[ServiceRecord]:
        if not isinstance(server_url, str) or not server_url:
            raise InvalidServerUrl("server_url must be non-empty text")
        return self.find(QueryFilter(server_url=server_url), now)

    def list_live(self, now: int) -> list[ServiceRecord]:
        return self.find(QueryFilter(), now)
