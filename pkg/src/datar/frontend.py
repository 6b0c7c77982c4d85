"""Log-mel filterbank features and the on-disk spectrogram format."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BadConfig, BadMagic, TooShort, TruncatedFile

SAMPLE_RATE = 43_000
N_MELS = 128
FRAME_LENGTH = 1024
FRAME_SHIFT = 430
LOG_FLOOR = 1e-10

SPEC_MAGIC = b"DSPC"
SPEC_VERSION = 1
_SPEC_HEADER = struct.Struct("<4sIII")


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise BadConfig(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise BadConfig("waveform contains non-finite samples")


@dataclass
class Spectrogram:
    """Log-mel energies, ``values[mel_bin, frame]``."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or min(self.values.shape) < 1:
            raise BadConfig(f"spectrogram must be a non-empty 2-D array, got {self.values.shape}")

    @property
    def h(self) -> int:
        return self.values.shape[0]

    @property
    def T(self) -> int:
        return self.values.shape[1]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_centers(n_mels: int, sample_rate: float) -> np.ndarray:
    """Edge and center points in mel: ``n_mels + 2`` values from 0 Hz to Nyquist."""
    return np.linspace(0.0, float(hz_to_mel(sample_rate / 2.0)), n_mels + 2)


def mel_filter_response(freqs, n_mels: int, sample_rate: float) -> np.ndarray:
    """Triangular filter weights at arbitrary frequencies, shape ``(n_mels, len(freqs))``.

    Triangles are linear in mel and peak at exactly 1 on their center.
    """
    pts = mel_centers(n_mels, sample_rate)
    m = hz_to_mel(np.atleast_1d(freqs))[None, :]
    lo, mid, hi = pts[:-2, None], pts[1:-1, None], pts[2:, None]
    up = (m - lo) / (mid - lo)
    down = (hi - m) / (hi - mid)
    return np.maximum(0.0, np.minimum(up, down))


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: float) -> np.ndarray:
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    return mel_filter_response(freqs, n_mels, sample_rate)


def frame_count(n_samples: int, frame_length: int, frame_shift: int) -> int:
    return 1 + (n_samples - frame_length) // frame_shift


def fbank(w: Waveform, n_mels: int = N_MELS, frame_length: int = FRAME_LENGTH,
          frame_shift: int = FRAME_SHIFT) -> Spectrogram:
    """Hann-windowed power spectrum, triangular mel filters, natural log with a 1e-10 floor."""
    if n_mels < 1 or frame_length < 2 or frame_shift < 1:
        raise BadConfig(f"bad fbank config: n_mels={n_mels}, frame_length={frame_length}, "
                        f"frame_shift={frame_shift}")
    x = w.samples
    if x.ndim != 1:
        raise BadConfig("waveform must be mono")
    if len(x) < frame_length:
        raise TooShort(f"{len(x)} samples is shorter than one frame ({frame_length})")
    n_frames = frame_count(len(x), frame_length, frame_shift)
    frames = np.lib.stride_tricks.sliding_window_view(x, frame_length)[::frame_shift][:n_frames]
    window = np.hanning(frame_length + 1)[:-1]  # periodic Hann
    power = np.abs(np.fft.rfft(frames * window, n=frame_length, axis=1)) ** 2
    fb = mel_filterbank(n_mels, frame_length, w.sample_rate)
    energies = fb @ power.T
    return Spectrogram(np.log(energies + LOG_FLOOR))


def write_spec(s: Spectrogram, path) -> None:
    vals = np.ascontiguousarray(s.values, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_SPEC_HEADER.pack(SPEC_MAGIC, SPEC_VERSION, s.h, s.T))
        fh.write(vals.tobytes())


def read_spec(path) -> Spectrogram:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != SPEC_MAGIC:
        raise BadMagic(f"{path}: not a spectrogram file")
    if len(raw) < _SPEC_HEADER.size:
        raise TruncatedFile(f"{path}: header truncated")
    _, version, h, T = _SPEC_HEADER.unpack_from(raw)
    if version != SPEC_VERSION:
        raise BadMagic(f"{path}: unsupported version {version}")
    need = _SPEC_HEADER.size + 4 * h * T
    if len(raw) < need:
        raise TruncatedFile(f"{path}: expected {need} bytes, found {len(raw)}")
    vals = np.frombuffer(raw, dtype="<f4", count=h * T, offset=_SPEC_HEADER.size)
    return Spectrogram(vals.reshape(h, T).astype(np.float64))


def standardize(values: np.ndarray) -> np.ndarray:
    return (values - values.mean()) / (values.std() + 1e-6)


def read_audio(path, sample_rate: int = SAMPLE_RATE) -> Waveform:
    """Load a mono WAV (8/16/32-bit PCM) or raw little-endian float32 PCM."""
    path = Path(path)
    if path.suffix.lower() == ".wav":
        import wave

        with wave.open(str(path), "rb") as wf:
            width = wf.getsampwidth()
            rate = wf.getframerate()
            nch = wf.getnchannels()
            raw = wf.readframes(wf.getnframes())
        dtype = {1: np.uint8, 2: "<i2", 4: "<i4"}.get(width)
        if dtype is None:
            raise BadConfig(f"{path}: unsupported sample width {width}")
        data = np.frombuffer(raw, dtype=dtype).astype(np.float64)
        if width == 1:
            data = (data - 128.0) / 128.0
        else:
            data /= float(2 ** (8 * width - 1))
        if nch > 1:
            data = data.reshape(-1, nch).mean(axis=1)
        return Waveform(data, rate)
    data = np.fromfile(path, dtype="<f4").astype(np.float64)
    return Waveform(data, sample_rate)
