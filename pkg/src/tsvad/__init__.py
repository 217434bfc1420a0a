"""Two-pass speaker diarization with profile-tolerant target-speaker VAD."""

__version__ = "0.1.0"
