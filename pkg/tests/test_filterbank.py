import numpy as np
import pytest

from anclab import filterbank as fb
from anclab.dsp import DelayLine
from anclab.errors import ConfigurationError, InternalInvariantError

from conftest import dft_oracle, idft_oracle


def dtft(h, omega):
    """Direct DTFT evaluation; the prototype-response oracle."""
    n = np.arange(len(h))
    return np.sum(h * np.exp(-1j * omega * n))


class TestPrototype:
    def test_unity_dc_gain(self):
        for K, Q in ((4, 64), (8, 64), (32, 64)):
            c = fb.design_prototype(K, Q)
            assert abs(c.sum() - 1.0) <= 1e-12

    def test_configuration_of_record(self):
        # K = 32 subbands with Q = N/D = 64 prototype taps
        c = fb.design_prototype(32, 64)
        assert c.shape == (64,)
        assert np.all(np.isfinite(c))

    def test_stopband_attenuation(self):
        # At K=4 the stopband edge 2*pi/K sits well past the transition of a
        # 64-tap Hamming design; the DTFT oracle confirms > 40 dB rejection.
        K, Q = 4, 64
        c = fb.design_prototype(K, Q)
        atten = -20 * np.log10(abs(dtft(c, 2 * np.pi / K)) / abs(dtft(c, 0.0)))
        assert atten >= 40.0

    def test_odd_k_rejected(self):
        with pytest.raises(ConfigurationError):
            fb.design_prototype(5, 64)
        with pytest.raises(ConfigurationError):
            fb.design_prototype(4, 4)


class TestAnalysisCoeffs:
    def test_band_zero_is_prototype(self):
        c = fb.design_prototype(8, 32)
        a = fb.analysis_coeffs(c, 8)
        assert np.allclose(a[0], c)

    def test_two_band_alternation(self):
        a = fb.analysis_coeffs(np.array([1.0, 1.0]), 2)
        assert np.allclose(a[1], [1.0, -1.0], atol=1e-12)

    def test_unit_modulus_modulation(self):
        c = fb.design_prototype(8, 32)
        a = fb.analysis_coeffs(c, 8)
        assert np.allclose(np.abs(a), np.abs(c)[None, :], atol=1e-15)

    def test_modulation_identity(self):
        # geometric sum: sum_k a_k[q] = K c_q when K | q, else 0
        K, Q = 8, 32
        c = fb.design_prototype(K, Q)
        a = fb.analysis_coeffs(c, K)
        s = a.sum(axis=0)
        expect = np.where(np.arange(Q) % K == 0, K * c, 0.0)
        assert np.max(np.abs(s - expect)) <= 1e-12


class TestSubbandAnalyze:
    def _filled(self, bank, seed):
        rng = np.random.default_rng(seed)
        xh = DelayLine(bank.n_taps)
        eh = DelayLine(bank.n_taps)
        for v, u in zip(rng.standard_normal(bank.n_taps), rng.standard_normal(bank.n_taps)):
            xh.push(v)
            eh.push(u)
        return xh, eh

    def test_zero_history_zero_output(self):
        bank = fb.FilterBank.design(16, 4)
        xk, ek = fb.subband_analyze(bank, DelayLine(16), DelayLine(16))
        assert np.max(np.abs(xk)) == 0 and np.max(np.abs(ek)) == 0

    def test_box_prototype_band_zero_is_mean(self):
        bank = fb.FilterBank.design(16, 4)
        box = fb.FilterBank(K=4, D=2, Q=8, prototype=np.full(8, 1 / 8),
                            analysis=fb.analysis_coeffs(np.full(8, 1 / 8), 4))
        xh, eh = self._filled(bank, 0)
        xk, _ = fb.subband_analyze(box, xh, eh)
        assert xk[0] == pytest.approx(np.mean(xh.window(8, 2)), rel=1e-12)

    def test_matches_strided_dot_oracle(self):
        bank = fb.FilterBank.design(16, 4)  # D=2, Q=8
        xh, eh = self._filled(bank, 3)
        xk, ek = fb.subband_analyze(bank, xh, eh)
        xw = xh.window(bank.Q, bank.D)
        ew = eh.window(bank.Q, bank.D)
        for k in range(bank.K):
            assert xk[k] == pytest.approx(np.sum(bank.analysis[k] * xw), abs=1e-14)
            assert ek[k] == pytest.approx(np.sum(bank.analysis[k] * ew), abs=1e-14)

    def test_insufficient_history_rejected(self):
        bank = fb.FilterBank.design(16, 4)
        with pytest.raises(ConfigurationError):
            fb.subband_analyze(bank, DelayLine(8), DelayLine(16))

    def test_decimation_consistency(self):
        # analysing at every sample or only at the instants gives identical
        # values at the instants: the output depends only on the history
        bank = fb.FilterBank.design(32, 4)
        rng = np.random.default_rng(9)
        xh1, eh1 = DelayLine(32), DelayLine(32)
        xh2, eh2 = DelayLine(32), DelayLine(32)
        stream = rng.standard_normal(200)
        every, instants = [], []
        for n, v in enumerate(stream):
            xh1.push(v); eh1.push(-v)
            xh2.push(v); eh2.push(-v)
            got = fb.subband_analyze(bank, xh1, eh1)
            if n % bank.D == 0:
                every.append(got)
                instants.append(fb.subband_analyze(bank, xh2, eh2))
        for (a1, b1), (a2, b2) in zip(every, instants):
            assert np.array_equal(a1, a2) and np.array_equal(b1, b2)


class TestSubbandFeatures:
    def test_zero_history_zero_frame(self):
        bank = fb.FilterBank.design(16, 4)
        frame = fb.subband_features(bank, np.zeros((2, 8), complex), np.zeros(2, complex))
        assert np.max(np.abs(frame.x_ff)) == 0 and np.max(np.abs(frame.e_f)) == 0

    def test_error_feature_is_unit_modulus(self):
        # DFT of a unit sample in the last slot: e^{-j 2 pi m (Q-1)/Q}
        bank = fb.FilterBank.design(16, 4)
        frame = fb.subband_features(bank, np.zeros((2, 8), complex),
                                    np.array([1.0 + 0j, 0.0]))
        expect = np.exp(-2j * np.pi * np.arange(8) * 7 / 8)
        assert np.allclose(frame.e_f[0], expect, atol=1e-12)
        assert np.allclose(np.abs(frame.e_f[0]), 1.0, atol=1e-12)

    def test_oldest_impulse_gives_flat_magnitude(self):
        bank = fb.FilterBank.design(16, 4)
        hist = np.zeros((1, 8), complex)
        hist[0, -1] = 2.0  # oldest slot of the newest-first history
        frame = fb.subband_features(bank, hist, np.zeros(1, complex))
        assert np.allclose(np.abs(frame.x_ff[0]), 2.0, atol=1e-12)

    def test_matches_dft_oracle(self):
        bank = fb.FilterBank.design(16, 4)
        rng = np.random.default_rng(4)
        hist = rng.standard_normal((2, 8)) + 1j * rng.standard_normal((2, 8))
        e_now = rng.standard_normal(2) + 1j * rng.standard_normal(2)
        frame = fb.subband_features(bank, hist, e_now)
        for k in range(2):
            assert np.allclose(frame.x_ff[k], dft_oracle(hist[k]), atol=1e-12)
            padded = np.zeros(8, complex)
            padded[-1] = e_now[k]
            assert np.allclose(frame.e_f[k], dft_oracle(padded), atol=1e-12)


class TestStackDirect:
    def test_zero_weights(self):
        assert np.max(np.abs(fb.stack_direct(fb.SubbandWeights.zeros(8)))) == 0

    def test_dc_bin_against_idft_oracle(self):
        w = fb.SubbandWeights.zeros(8)
        w.w_s[0] = 1.0
        got = fb.stack_direct(w)
        spec = np.zeros(8, complex)
        spec[0] = 1.0
        assert np.allclose(got, idft_oracle(spec).real, atol=1e-14)
        assert np.allclose(got, np.full(8, 1 / 8), atol=1e-14)

    def test_random_against_idft_oracle(self):
        rng = np.random.default_rng(2)
        half = rng.standard_normal(4) + 1j * rng.standard_normal(4)
        got = fb.stack_direct(fb.SubbandWeights(half.copy(), 8))
        spec = np.zeros(8, complex)
        spec[0] = half[0].real
        spec[1:4] = half[1:]
        spec[5:] = np.conj(half[1:])[::-1]
        oracle = idft_oracle(spec)
        assert np.max(np.abs(oracle.imag)) <= 1e-12
        assert np.allclose(got, oracle.real, atol=1e-12)

    def test_output_is_real_for_random_inputs(self):
        rng = np.random.default_rng(3)
        for n in (8, 64, 256):
            half = rng.standard_normal(n // 2) + 1j * rng.standard_normal(n // 2)
            w = fb.stack_direct(fb.SubbandWeights(half, n))
            assert w.dtype == np.float64 and w.shape == (n,)

    def test_linearity(self):
        rng = np.random.default_rng(4)
        a = rng.standard_normal(16) + 1j * rng.standard_normal(16)
        b = rng.standard_normal(16) + 1j * rng.standard_normal(16)
        lhs = fb.stack_direct(fb.SubbandWeights(2.0 * a + 3.0 * b, 32))
        rhs = 2.0 * fb.stack_direct(fb.SubbandWeights(a, 32)) \
            + 3.0 * fb.stack_direct(fb.SubbandWeights(b, 32))
        assert np.max(np.abs(lhs - rhs)) <= 1e-12

    def test_flat_spectrum_concentrates_at_zero_lag(self):
        gamma = 0.7
        w = fb.stack_direct(fb.SubbandWeights(np.full(16, gamma, complex), 32))
        spec = np.zeros(32, complex)
        spec[:16] = gamma
        spec[0] = gamma
        spec[17:] = gamma
        spec[16] = 0.0
        oracle = idft_oracle(spec).real
        assert np.allclose(w, oracle, atol=1e-12)
        assert np.argmax(np.abs(w)) == 0


class TestStackFft1:
    def test_zero_weights(self):
        assert np.max(np.abs(fb.stack_fft1(np.zeros((4, 4), complex), 8))) == 0

    def test_band_map(self):
        band, bins = fb.fft1_band_map(8, 4)
        assert np.array_equal(band, [0, 0, 1, 1])
        assert np.array_equal(bins, [0, 1, 2, 3])

    def test_hand_evaluated_index_map(self):
        # K=4, N=8: fullband bins (0,1) come from subband 0 bins (0,1),
        # bins (2,3) from subband 1 bins (2,3), then the Hermitian mirror
        wk = np.zeros((4, 4), complex)
        wk[0] = [1.0, 2.0, 9.0, 9.0]
        wk[1] = [9.0, 9.0, 3.0 + 1.0j, 4.0]
        got = fb.stack_fft1(wk, 8)
        spec = np.zeros(8, complex)
        spec[0] = 1.0
        spec[1] = 2.0
        spec[2] = 3.0 + 1.0j
        spec[3] = 4.0
        spec[5:] = np.conj(spec[1:4])[::-1]
        assert np.allclose(got, idft_oracle(spec).real, atol=1e-12)

    def test_only_first_half_bands_matter(self):
        rng = np.random.default_rng(5)
        wk = rng.standard_normal((4, 4)) + 1j * rng.standard_normal((4, 4))
        wk2 = wk.copy()
        wk2[2:] = 999.0
        assert np.array_equal(fb.stack_fft1(wk, 8), fb.stack_fft1(wk2, 8))

    def test_output_real(self):
        rng = np.random.default_rng(6)
        wk = rng.standard_normal((8, 16)) + 1j * rng.standard_normal((8, 16))
        w = fb.stack_fft1(wk, 64)
        assert w.dtype == np.float64 and w.shape == (64,)

    def test_wrong_width_rejected(self):
        with pytest.raises(ConfigurationError):
            fb.stack_fft1(np.zeros((4, 8), complex), 8)


class TestResidueGuard:
    def test_non_hermitian_spectrum_detected(self):
        from anclab.filterbank import _real_ifft_checked

        spec = np.zeros(8, complex)
        spec[1] = 1.0 + 1.0j  # no mirror partner: imaginary output
        with pytest.raises(InternalInvariantError):
            _real_ifft_checked(spec)
