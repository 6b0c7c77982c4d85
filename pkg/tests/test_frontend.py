import math
import struct
import wave

import numpy as np
import pytest

from datar import frontend as fe
from datar.errors import BadMagic, TooShort, TruncatedFile


def sine(freq, seconds=0.5, sr=fe.SAMPLE_RATE):
    t = np.arange(int(seconds * sr)) / sr
    return fe.Waveform(np.sin(2 * np.pi * freq * t), sr)


def test_silence_hits_log_floor():
    s = fe.fbank(fe.Waveform(np.zeros(fe.SAMPLE_RATE), fe.SAMPLE_RATE))
    assert np.all(s.values == np.log(1e-10))


@pytest.mark.parametrize("k", [30, 60, 100, 120])
def test_sine_at_filter_center_peaks_there(k):
    center = float(fe.mel_to_hz(fe.mel_centers(fe.N_MELS, fe.SAMPLE_RATE)[k + 1]))
    resp = fe.mel_filter_response([center], fe.N_MELS, fe.SAMPLE_RATE)[:, 0]
    assert resp[k] == pytest.approx(1.0, abs=1e-12)
    s = fe.fbank(sine(center))
    assert np.all(np.argmax(s.values, axis=0) == k)


def test_frame_count_ten_seconds():
    n = 10 * fe.SAMPLE_RATE
    # count window starts directly
    starts = 0
    while starts * fe.FRAME_SHIFT + fe.FRAME_LENGTH <= n:
        starts += 1
    assert fe.frame_count(n, fe.FRAME_LENGTH, fe.FRAME_SHIFT) == starts == 998
    w = fe.Waveform(np.random.default_rng(0).standard_normal(n) * 0.1, fe.SAMPLE_RATE)
    assert fe.fbank(w).values.shape == (fe.N_MELS, 998)


def test_mel_scale_round_trip():
    f = np.array([0.0, 100.0, 1000.0, 21500.0])
    assert np.allclose(fe.mel_to_hz(fe.hz_to_mel(f)), f)
    assert fe.hz_to_mel(1000.0) == pytest.approx(2595 * math.log10(1 + 1000 / 700))


def test_filterbank_triangles():
    fb = fe.mel_filterbank(40, 1024, 16000)
    assert fb.shape == (40, 513)
    assert np.all(fb >= 0) and np.all(fb <= 1.0)
    # interior bins are covered by exactly two overlapping triangles summing to 1
    freqs = np.arange(513) * 16000 / 1024
    edges = fe.mel_to_hz(fe.mel_centers(40, 16000))
    inner = (freqs > edges[1]) & (freqs < edges[-2])
    assert np.allclose(fb[:, inner].sum(axis=0), 1.0)


def test_fbank_deterministic():
    w = sine(440.0)
    assert np.array_equal(fe.fbank(w).values, fe.fbank(w).values)


def test_too_short():
    with pytest.raises(TooShort):
        fe.fbank(fe.Waveform(np.zeros(100), 16000))


def test_spec_round_trip_bit_exact(tmp_path, rng):
    vals = rng.standard_normal((128, 64)).astype(np.float32).astype(np.float64)
    path = tmp_path / "a.dspc"
    fe.write_spec(fe.Spectrogram(vals), path)
    back = fe.read_spec(path).values
    assert back.shape == (128, 64)
    assert back.tobytes() == vals.tobytes()


def test_spec_bad_magic(tmp_path):
    p = tmp_path / "x.dspc"
    p.write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(BadMagic):
        fe.read_spec(p)


def test_spec_truncated(tmp_path):
    p = tmp_path / "x.dspc"
    p.write_bytes(struct.pack("<4sIII", b"DSPC", 1, 4, 4) + bytes(4 * 15))
    with pytest.raises(TruncatedFile):
        fe.read_spec(p)


def test_read_wav_and_raw(tmp_path):
    x = (np.sin(np.linspace(0, 20, 2000)) * 0.5)
    pcm = np.round(x * 32767).astype("<i2")
    with wave.open(str(tmp_path / "a.wav"), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(16000)
        wf.writeframes(pcm.tobytes())
    w = fe.read_audio(tmp_path / "a.wav")
    assert w.sample_rate == 16000
    assert np.max(np.abs(w.samples - x)) < 1e-4
    x.astype("<f4").tofile(tmp_path / "a.pcm")
    r = fe.read_audio(tmp_path / "a.pcm", 8000)
    assert r.sample_rate == 8000 and np.allclose(r.samples, x, atol=1e-7)
