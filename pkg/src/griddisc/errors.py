"""Exception hierarchy shared across the registry, storage, wire codec and RPC layers."""


class DiscoveryError(Exception):
    """Base class for every error raised by griddisc."""

    # JSON-RPC error code reported when this error crosses the wire.
    rpc_code = -32000


class NotFound(DiscoveryError):
    rpc_code = -32000


class InvalidRecord(DiscoveryError):
    rpc_code = -32001


class LeaseOutOfRange(DiscoveryError):
    rpc_code = -32002


class CapacityExceeded(DiscoveryError):
    rpc_code = -32003


class InvalidKey(DiscoveryError):
    rpc_code = -32602


class InvalidServerUrl(DiscoveryError):
    rpc_code = -32602


class IoFailure(DiscoveryError):
    pass


class CorruptStore(DiscoveryError):
    def __init__(self, message: str, recovered: int):
        super().__init__(message)
        self.recovered = recovered


class PayloadTooLarge(DiscoveryError):
    pass


class DecodeError(DiscoveryError):
    """A received datagram could not be decoded."""


class BadMagic(DecodeError):
    pass


class UnsupportedVersion(DecodeError):
    pass


class TruncatedPacket(DecodeError):
    pass


class MalformedPayload(DecodeError):
    pass


class ConfigError(DiscoveryError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key
