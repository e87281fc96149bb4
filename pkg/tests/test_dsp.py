import struct
import wave

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from wavedenoise.dsp import (
    AudioBuffer,
    WavError,
    dequantize_8bit,
    istft,
    mu_law_compand,
    mu_law_expand,
    quantize_8bit,
    read_wav,
    stft,
    write_wav,
)


def _write_pcm(path, codes, channels=1, rate=16000, width=2):
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(channels)
        wf.setsampwidth(width)
        wf.setframerate(rate)
        wf.writeframes(np.asarray(codes, dtype=f"<i{width}").tobytes())


class TestWav:
    def test_pcm_scaling(self, tmp_path):
        _write_pcm(tmp_path / "a.wav", [0, 16384, -16384, -32768])
        buf = read_wav(tmp_path / "a.wav")
        assert buf.sample_rate == 16000
        assert buf.samples.tolist() == [0.0, 0.5, -0.5, -1.0]

    def test_stereo_rejected(self, tmp_path):
        _write_pcm(tmp_path / "s.wav", [0, 0, 1, 1], channels=2)
        with pytest.raises(WavError, match="unsupported channel count"):
            read_wav(tmp_path / "s.wav")

    def test_wrong_rate_rejected(self, tmp_path):
        _write_pcm(tmp_path / "r.wav", [0, 1], rate=48000)
        with pytest.raises(WavError, match="sample rate"):
            read_wav(tmp_path / "r.wav")

    def test_bit_depth_rejected(self, tmp_path):
        _write_pcm(tmp_path / "b.wav", [0, 1], width=4)
        with pytest.raises(WavError, match="bit depth"):
            read_wav(tmp_path / "b.wav")

    def test_float_wav_rejected(self, tmp_path):
        data = np.zeros(4, dtype="<f4").tobytes()
        fmt = struct.pack("<HHIIHH", 3, 1, 16000, 64000, 4, 32)
        body = b"WAVE" + b"fmt " + struct.pack("<I", 16) + fmt + b"data" + struct.pack("<I", len(data)) + data
        (tmp_path / "f.wav").write_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)
        with pytest.raises(WavError):
            read_wav(tmp_path / "f.wav")

    def test_not_a_wav(self, tmp_path):
        (tmp_path / "x.wav").write_bytes(b"hello world, definitely not audio")
        with pytest.raises(WavError, match="not a wav"):
            read_wav(tmp_path / "x.wav")

    def test_unknown_chunks_skipped(self, tmp_path):
        data = np.array([0, 16384], dtype="<i2").tobytes()
        fmt = struct.pack("<HHIIHH", 1, 1, 16000, 32000, 2, 16)
        body = (b"WAVE" + b"fmt " + struct.pack("<I", 16) + fmt
                + b"LIST" + struct.pack("<I", 4) + b"INFO"
                + b"data" + struct.pack("<I", len(data)) + data)
        (tmp_path / "c.wav").write_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)
        assert read_wav(tmp_path / "c.wav").samples.tolist() == [0.0, 0.5]

    def test_write_codes(self, tmp_path):
        write_wav(AudioBuffer([0.0, 1.0, -1.0]), tmp_path / "w.wav")
        with wave.open(str(tmp_path / "w.wav")) as wf:
            codes = np.frombuffer(wf.readframes(3), dtype="<i2")
        assert codes.tolist() == [0, 32767, -32768]

    def test_clipping_counted(self, tmp_path):
        with pytest.warns(UserWarning, match="2 samples"):
            clipped = write_wav(AudioBuffer([1.5, -2.0, 0.25]), tmp_path / "c.wav")
        assert clipped == 2
        assert read_wav(tmp_path / "c.wav").samples.tolist() == [32767 / 32768, -1.0, 0.25]

    def test_round_trip_error_bound(self, tmp_path):
        x = np.random.default_rng(3).uniform(-1, 1, 4000)
        write_wav(AudioBuffer(x), tmp_path / "rt.wav")
        back = read_wav(tmp_path / "rt.wav").samples
        assert np.max(np.abs(back - x)) <= 1 / 32768

    def test_unwritable_path(self, tmp_path):
        with pytest.raises(OSError):
            write_wav(AudioBuffer([0.0]), tmp_path / "missing" / "x.wav")


class TestMuLaw:
    def test_known_values(self):
        assert mu_law_compand(0.0) == 0.0
        assert mu_law_compand(1.0) == pytest.approx(1.0, abs=1e-15)
        # ln(26.5) / ln(256), evaluated at 30 digits with mpmath
        assert mu_law_compand(0.1) == pytest.approx(0.590990056820399897, abs=1e-14)

    def test_inverse(self):
        for x in (-1.0, -0.5, 0.0, 0.5, 1.0):
            assert abs(mu_law_expand(mu_law_compand(x)) - x) <= 1e-12

    @given(st.floats(-1, 1), st.floats(-1, 1))
    def test_odd_and_monotone(self, a, b):
        assert mu_law_compand(-a) == -mu_law_compand(a)
        if a < b:
            assert mu_law_compand(a) <= mu_law_compand(b)

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            mu_law_compand(1.5)
        with pytest.raises(ValueError):
            mu_law_compand(0.5, mu=0)

    def test_quantizer_endpoints(self):
        assert quantize_8bit(-1.0) == 0
        assert quantize_8bit(np.nextafter(1.0, 0.0)) == 255
        assert quantize_8bit(1.0) == 255
        assert dequantize_8bit(0) == pytest.approx(-1 + 1 / 256)

    def test_full_chain_error_bound(self):
        # brute force over every code: width of each cell after expansion
        edges = np.linspace(-1.0, 1.0, 257)
        widths = np.diff(mu_law_expand(edges))
        bound = widths.max()
        x = np.random.default_rng(0).uniform(-1, 1, 20000)
        decoded = mu_law_expand(dequantize_8bit(quantize_8bit(mu_law_compand(x))))
        err = np.abs(decoded - x)
        assert err.max() <= bound
        # per-cell: never more than that cell's own width
        cells = quantize_8bit(mu_law_compand(x))
        assert np.all(err <= widths[cells] + 1e-15)


class TestStft:
    def test_zero_in_zero_out(self):
        frames = stft(np.zeros(2048))
        assert frames.frames.shape == ((2048 - 512) // 256 + 1, 257)
        assert not np.any(frames.frames)

    def test_cosine_peak_bin(self):
        n = np.arange(4096)
        x = np.cos(2 * np.pi * 4 * n / 512)
        mags = np.abs(stft(x, 512, 256).frames)
        assert np.all(np.argmax(mags, axis=1) == 4)

    def test_parseval(self):
        x = np.random.default_rng(1).standard_normal(3000)
        frames = stft(x, 512, 256)
        win = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(512) / 512)
        for i, spec in enumerate(frames.frames):
            seg = x[i * 256:i * 256 + 512] * win
            full = np.abs(spec) ** 2
            two_sided = full[0] + full[-1] + 2 * full[1:-1].sum()
            assert two_sided / 512 == pytest.approx(np.sum(seg ** 2), rel=1e-9)

    def test_short_buffer(self):
        with pytest.raises(ValueError, match="shorter"):
            stft(np.zeros(100))

    def test_round_trip_interior(self):
        x = np.random.default_rng(2).uniform(-1, 1, 16000)
        frames = stft(x)
        y = istft(frames).samples
        interior = slice(256, (frames.num_frames - 1) * 256 + 256)
        err = np.max(np.abs(y[interior] - x[interior])) / np.max(np.abs(x[interior]))
        assert err <= 1e-9

    def test_zero_spectrum(self):
        frames = stft(np.random.default_rng(4).standard_normal(2048))
        assert not np.any(istft(frames.with_frames(np.zeros_like(frames.frames))).samples)

    def test_unit_gain_bit_identical(self):
        frames = stft(np.random.default_rng(5).standard_normal(4096))
        a = istft(frames).samples
        b = istft(frames.with_frames(frames.frames * 1.0)).samples
        assert np.array_equal(a, b)

    def test_non_cola_rejected(self):
        frames = stft(np.zeros(2048), 512, 128)
        with pytest.raises(ValueError, match="hop"):
            istft(frames)

    def test_deterministic(self):
        x = np.random.default_rng(6).standard_normal(4096)
        assert np.array_equal(stft(x).frames, stft(x).frames)
