"""Exception hierarchy shared by all stages."""


class EchoBPError(Exception):
    """Base class for every structured error raised by the package."""


class SignalError(EchoBPError, ValueError):
    pass


class ConfigError(EchoBPError, ValueError):
    pass


class StreamFormatError(EchoBPError):
    pass


class TrackingError(EchoBPError):
    pass


class SNRGateError(TrackingError):
    """Raised when a channel's echo SNR is below the measurement gate."""

    def __init__(self, channel, snr_db, gate_db):
        self.channel = channel
        self.snr_db = snr_db
        self.gate_db = gate_db
        super().__init__(
            f"SNR gate failed on channel {channel}: {snr_db:.2f} dB < {gate_db:.2f} dB")


class NoArteryError(TrackingError):
    pass


class BeatDetectionError(EchoBPError):
    pass


class InsufficientBeatsError(EchoBPError):
    pass
