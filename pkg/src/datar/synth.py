"""Deterministic toy audio events standing in for real event-classification clips."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BadSpec
from .frontend import FRAME_LENGTH, FRAME_SHIFT, SAMPLE_RATE, Waveform

KINDS = ("tone", "chirp", "noise-burst", "harmonic-stack")


@dataclass(frozen=True)
class EventSpec:
    class_id: int
    kind: str
    f_lo: float
    f_hi: float
    duration: float  # seconds
    snr_db: float = 10.0

    def validate(self, sample_rate: int) -> None:
        if self.kind not in KINDS:
            raise BadSpec(f"unknown event kind {self.kind!r}")
        if self.duration <= 0:
            raise BadSpec("event duration must be positive")
        if not 0 < self.f_lo <= self.f_hi:
            raise BadSpec(f"bad frequency range ({self.f_lo}, {self.f_hi})")
        top = self.f_hi * (5 if self.kind == "harmonic-stack" else 1)
        if top >= sample_rate / 2:
            raise BadSpec(f"{self.kind} up to {top} Hz exceeds Nyquist {sample_rate / 2}")


@dataclass(frozen=True)
class Clip:
    waveform: Waveform
    label: int
    onset: int  # first sample of the event
    freq: float  # base frequency of the event


def clip_samples(frames: int, frame_length: int = FRAME_LENGTH, frame_shift: int = FRAME_SHIFT) -> int:
    """Waveform length that yields exactly ``frames`` analysis frames."""
    return frame_length + (frames - 1) * frame_shift


def _bandpass_noise(rng, n, f_lo, f_hi, sr):
    spec = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, 1.0 / sr)
    spec[(freqs < f_lo) | (freqs > f_hi)] = 0.0
    return np.fft.irfft(spec, n)


def render_event(kind: str, f: float, f_hi: float, n: int, sr: int, rng) -> np.ndarray:
    t = np.arange(n) / sr
    if kind == "tone":
        sig = np.sin(2 * np.pi * f * t)
    elif kind == "chirp":
        dur = n / sr
        sig = np.sin(2 * np.pi * (f * t + 0.5 * (f_hi - f) / dur * t * t))
    elif kind == "noise-burst":
        sig = _bandpass_noise(rng, n, f, f_hi, sr)
    else:
        sig = sum(np.sin(2 * np.pi * k * f * t) / k for k in range(1, 6))
    env = np.hanning(n) if n > 2 else np.ones(n)
    return sig * env ** 0.25


def _mix(event: np.ndarray, onset: int, n: int, snr_db: float, rng) -> np.ndarray:
    noise = rng.standard_normal(n)
    p_evt = np.mean(event ** 2)
    gain = np.sqrt(10 ** (snr_db / 10.0) / p_evt) if p_evt > 0 else 0.0
    clip = noise.copy()
    clip[onset:onset + len(event)] += gain * event
    return clip / np.max(np.abs(clip))


def gen_dataset(n_per_class: int, classes: list[EventSpec], sample_rate: int = SAMPLE_RATE,
                seed: int = 0, n_samples: int | None = None) -> list[tuple[Waveform, int]]:
    """Class-balanced clips of background noise plus each class's event.

    The event frequency is drawn uniformly from the class's range and its
    onset uniformly over the clip. Output order is class-major.
    """
    if n_per_class < 1 or not classes:
        raise BadSpec("need at least one class and one clip per class")
    for spec in classes:
        spec.validate(sample_rate)
    rng = np.random.default_rng(seed)
    out = []
    for spec in classes:
        ev_n = int(round(spec.duration * sample_rate))
        n = n_samples if n_samples is not None else ev_n
        if ev_n > n:
            raise BadSpec(f"event of {ev_n} samples does not fit a {n}-sample clip")
        for _ in range(n_per_class):
            if spec.kind in ("tone", "harmonic-stack"):
                f = rng.uniform(spec.f_lo, spec.f_hi)
            else:
                f = spec.f_lo
            onset = int(rng.integers(0, n - ev_n + 1))
            event = render_event(spec.kind, f, spec.f_hi, ev_n, sample_rate, rng)
            out.append((Waveform(_mix(event, onset, n, spec.snr_db, rng), sample_rate), spec.class_id))
    return out


def gen_shifted_task(seed: int = 0, n_per_class: int = 16, num_classes: int = 4,
                     sample_rate: int = SAMPLE_RATE, n_samples: int | None = None,
                     event_seconds: float = 0.3, snr_db: float = 10.0,
                     f_range: tuple[float, float] = (300.0, 3000.0)) -> list[Clip]:
    """Clips whose label is the event kind, with onset and pitch drawn per clip.

    Discriminative energy lands at a random time-frequency position, so the
    label never depends on where the event sits.
    """
    if not 1 <= num_classes <= len(KINDS):
        raise BadSpec(f"num_classes must be in 1..{len(KINDS)}")
    if n_samples is None:
        n_samples = clip_samples(128)
    ev_n = int(round(event_seconds * sample_rate))
    if ev_n > n_samples:
        raise BadSpec("event longer than clip")
    rng = np.random.default_rng(seed)
    lo, hi = np.log(f_range[0]), np.log(f_range[1])
    out = []
    for label in range(num_classes):
        kind = KINDS[label]
        for _ in range(n_per_class):
            f = float(np.exp(rng.uniform(lo, hi)))
            onset = int(rng.integers(0, n_samples - ev_n + 1))
            event = render_event(kind, f, 2.0 * f, ev_n, sample_rate, rng)
            wav = Waveform(_mix(event, onset, n_samples, snr_db, rng), sample_rate)
            out.append(Clip(wav, label, onset, f))
    return out
