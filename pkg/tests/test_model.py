import numpy as np
import pytest

from anclab import model as md
from anclab.errors import ConfigurationError, InputError
from anclab.filterbank import SubbandFrame

DIMS = md.ModelDims(n_taps=64, subbands=4, hidden=8)


def random_frame(dims, seed):
    rng = np.random.default_rng(seed)
    shape = (dims.bands, dims.subband_len)
    return SubbandFrame(
        x_ff=rng.standard_normal(shape) + 1j * rng.standard_normal(shape),
        e_f=rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


class TestDims:
    def test_derived_sizes(self):
        assert DIMS.decimation == 2
        assert DIMS.subband_len == 32
        assert DIMS.bands == 2
        assert DIMS.feature_bins == 16
        assert DIMS.input_size == 128
        assert DIMS.output_size == 32

    def test_input_size_identity(self):
        # 2 * bands * bins * (re+im) == 2 N for every valid config
        for n, k in ((64, 4), (256, 8), (1024, 32)):
            d = md.ModelDims(n, k, 16)
            assert 2 * d.bands * d.feature_bins * 2 == d.input_size == 2 * n

    def test_full_scale_dims(self):
        d = md.ModelDims(1024, 32, 128)
        assert d.input_size == 2048 and d.output_size == 512

    def test_invalid_dims_rejected(self):
        with pytest.raises(ConfigurationError):
            md.ModelDims(100, 4, 8)
        with pytest.raises(ConfigurationError):
            md.ModelDims(64, 6, 8)
        with pytest.raises(ConfigurationError):
            md.ModelDims(64, 4, 0)


class TestInit:
    def test_same_seed_identical(self):
        a = md.init_params(DIMS, 3)
        b = md.init_params(DIMS, 3)
        assert all(np.array_equal(a.tensors[k], b.tensors[k]) for k in a.tensors)

    def test_different_seed_differs(self):
        a = md.init_params(DIMS, 3)
        b = md.init_params(DIMS, 4)
        assert any(not np.array_equal(a.tensors[k], b.tensors[k]) for k in a.tensors)

    def test_bounds_and_specials(self):
        p = md.init_params(DIMS, 5)
        h, m = DIMS.hidden, DIMS.input_size
        assert np.max(np.abs(p.tensors["enc_w"])) <= 1.0 / np.sqrt(m)
        assert np.max(np.abs(p.tensors["gru_wi"])) <= 1.0 / np.sqrt(h)
        assert np.array_equal(p.tensors["attn_qr"], np.zeros(h))
        assert np.array_equal(p.tensors["ln1_g"], np.ones(h))
        assert p.tensors["enc_slope"][0] == 0.25
        # the output layer starts quiet, near the amplitude-constraint floor
        assert np.max(np.abs(p.tensors["dec_w2"])) <= md.OUTPUT_INIT_SCALE / np.sqrt(h)

    def test_shapes_match_table(self):
        p = md.init_params(DIMS, 0)
        for name, shape in md.param_shapes(DIMS).items():
            assert p.tensors[name].shape == shape


class TestCompress:
    def test_zero_maps_to_zero(self):
        assert md.compress_input(np.array([0.0 + 0.0j]))[0] == 0.0

    def test_unit_magnitude_point(self):
        z = (np.e - 1.0) * np.exp(1j * 0.7)
        out = md.compress_input(np.array([z]))[0]
        assert abs(out) == pytest.approx(1.0, rel=1e-12)
        assert np.angle(out) == pytest.approx(0.7, abs=1e-12)

    def test_direct_evaluation(self):
        out = md.compress_input(np.array([3.0 + 4.0j]))[0]
        assert abs(out) == pytest.approx(np.log(6.0), rel=1e-12)
        assert np.angle(out) == pytest.approx(np.arctan2(4.0, 3.0), abs=1e-12)

    def test_magnitude_compression_properties(self):
        rng = np.random.default_rng(0)
        z = rng.standard_normal(500) + 1j * rng.standard_normal(500)
        out = md.compress_input(z)
        assert np.all(np.abs(out) <= np.abs(z) + 1e-15)
        # injective on magnitudes: strictly increasing map
        mags = np.sort(np.abs(z))
        assert np.all(np.diff(np.log1p(mags)) > 0)
        keep = np.abs(z) > 0
        assert np.allclose(np.angle(out[keep]), np.angle(z[keep]), atol=1e-12)


class TestConstraint:
    def test_unit_magnitude(self):
        out = md.constrain_gradient(np.array([np.exp(1j * 0.3)]))
        assert abs(out[0]) == pytest.approx(1.0, rel=1e-12)
        assert np.angle(out[0]) == pytest.approx(0.3, abs=1e-12)

    def test_ceiling_and_floor(self):
        assert abs(md.constrain_gradient(np.array([np.exp(11.0) + 0j]))[0]) == 2.0
        assert abs(md.constrain_gradient(np.array([1e-6 + 0j]))[0]) == 0.0

    def test_phase_equivariance(self):
        rng = np.random.default_rng(1)
        g = rng.lognormal(0, 2, 200) * np.exp(1j * rng.uniform(-np.pi, np.pi, 200))
        theta = 1.1
        a = md.constrain_gradient(g * np.exp(1j * theta))
        b = md.constrain_gradient(g) * np.exp(1j * theta)
        assert np.max(np.abs(a - b)) <= 1e-12


class TestForward:
    def test_output_shape_and_amplitude(self):
        params = md.init_params(DIMS, 7)
        g, h = md.forward(params, random_frame(DIMS, 0), np.zeros(DIMS.hidden))
        assert g.shape == (DIMS.output_size,)
        assert h.shape == (DIMS.hidden,)
        amps = np.abs(g)
        assert np.all(amps >= 0.0) and np.all(amps <= 2.0)

    def test_deterministic(self):
        params = md.init_params(DIMS, 7)
        frame = random_frame(DIMS, 1)
        h = np.random.default_rng(2).standard_normal(DIMS.hidden)
        a = md.forward(params, frame, h)
        b = md.forward(params, frame, h)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])

    def test_zero_frame_with_zeroed_output_layer_is_quiet(self):
        # |g| = 0 falls on the clamp floor: amplitude exactly 0, no update
        params = md.init_params(DIMS, 7)
        params.tensors["dec_w2"][:] = 0.0
        params.tensors["dec_b2"][:] = 0.0
        frame = SubbandFrame(x_ff=np.zeros((2, 32), complex), e_f=np.zeros((2, 32), complex))
        g, _ = md.forward(params, frame, np.zeros(DIMS.hidden))
        assert np.array_equal(g, np.zeros(DIMS.output_size, complex))

    def test_feature_vector_layout(self):
        frame = random_frame(DIMS, 3)
        u = md.feature_vector(frame, DIMS)
        assert u.shape == (DIMS.input_size,)
        bins = DIMS.feature_bins
        comp_x = md.compress_input(frame.x_ff[:, :bins])
        comp_e = md.compress_input(frame.e_f[:, :bins])
        assert np.array_equal(u[:bins], comp_x[0].real)
        assert np.array_equal(u[bins : 2 * bins], comp_e[0].real)
        assert np.array_equal(u[2 * bins : 3 * bins], comp_x[1].real)
        half = DIMS.input_size // 2
        assert np.array_equal(u[half : half + bins], comp_x[0].imag)

    def test_dimension_mismatch_rejected(self):
        params = md.init_params(DIMS, 7)
        bad = SubbandFrame(x_ff=np.zeros((1, 32), complex), e_f=np.zeros((1, 32), complex))
        with pytest.raises(ConfigurationError):
            md.forward(params, bad, np.zeros(DIMS.hidden))


class TestAttention:
    def test_output_equals_value_projection(self):
        # sequence length 1: softmax of the scalar score is identically 1
        params = md.init_params(DIMS, 9)
        rng = np.random.default_rng(4)
        u = rng.standard_normal(DIMS.hidden)
        got = md.attention(params, u)
        t = params.tensors
        gate = 1.0 / (1.0 + np.exp(-t["attn_vr"]))
        want = (u * gate) @ t["attn_wv"].T + t["attn_bv"]
        assert np.allclose(got, want, atol=1e-14)

    def test_zero_embedding_gates_at_half(self):
        params = md.init_params(DIMS, 9)
        assert np.allclose(1.0 / (1.0 + np.exp(-params.tensors["attn_qr"])), 0.5)

    def test_identity_linears_hand_oracle(self):
        params = md.init_params(md.ModelDims(64, 4, 2), 0)
        t = params.tensors
        t["attn_wv"][:] = np.eye(2)
        t["attn_bv"][:] = 0.0
        t["attn_vr"][:] = np.array([0.3, -0.2])
        u = np.array([1.5, -2.0])
        want = u / (1.0 + np.exp(-t["attn_vr"]))
        assert np.allclose(md.attention(params, u), want, atol=1e-14)


class TestGradientFlow:
    def test_dead_parameter_screen(self):
        # every tensor gets gradient except the q/k path, which is provably
        # zero at sequence length 1
        from anclab import autodiff as ad

        params = md.init_params(DIMS, 13)
        rng = np.random.default_rng(5)
        tape = ad.Tape()
        watched = {k: tape.watch(v) for k, v in params.tensors.items()}
        feats = rng.standard_normal((2, DIMS.input_size))
        h = rng.standard_normal((2, DIMS.hidden))
        out, h_new = md.forward_flat(watched, DIMS, feats, h)
        loss = ad.add(ad.mean_all(ad.mul(out, rng.standard_normal(out.data.shape))),
                      ad.mean_all(h_new))
        tape.backward(loss)
        zero_by_design = {"attn_qr", "attn_kr", "attn_wq", "attn_bq", "attn_wk", "attn_bk"}
        for name, t in watched.items():
            if name in zero_by_design:
                assert t.grad is None or np.max(np.abs(t.grad)) == 0.0, name
            else:
                assert t.grad is not None and np.max(np.abs(t.grad)) > 0.0, name


class TestCounts:
    def test_zero_size_model(self):
        # a degenerate dims object cannot be built; the smallest valid one
        # still counts consistently with the shape table
        p = md.init_params(md.ModelDims(64, 4, 1), 0)
        total = sum(np.prod(s) for s in md.param_shapes(p.dims).values())
        assert md.count_params_flops(p)["param_count"] == total

    def test_toy_hand_enumeration(self):
        dims = md.ModelDims(64, 4, 2)  # M=128, H=2, Z=32
        p = md.init_params(dims, 0)
        h, m, z = 2, 128, 32
        hand_params = (
            (h * m + h + 1)                      # encoder + slope
            + (3 * h * h) * 2 + (3 * h) * 2      # GRU weights + biases
            + 4 * h                              # two layer norms
            + 3 * h + 3 * (h * h + h)            # attention embeddings + linears
            + (4 * h * h + 4 * h + 1) + (h * 4 * h + h)  # feedforward block
            + (h * h + h + 1) + (2 * z * h + 2 * z))     # decoder
        counts = md.count_params_flops(p)
        assert counts["param_count"] == hand_params
        hand_flops = (h * m + 6 * h * h + 3 * h + 3 * h * h + 2 * h
                      + 8 * h * h + h * h + 2 * z * h + m + 2 * z)
        assert counts["flops_per_update"] == hand_flops

    def test_full_scale_reported_with_reference_delta(self):
        p = md.init_params(md.ModelDims(1024, 32, 128), 0)
        counts = md.count_params_flops(p)
        assert counts["param_count"] == 692_099
        assert counts["flops_per_update"] == 691_840
        # reference full-scale figures; the architecture's internal block
        # sizes are not pinned, so the delta is reported, not asserted away
        assert counts["param_count"] != 1_119_752


class TestCheckpoints:
    def test_roundtrip(self, tmp_path):
        params = md.init_params(DIMS, 21)
        path = tmp_path / "model.ckpt"
        md.save_checkpoint(params, path)
        loaded = md.load_checkpoint(path)
        assert loaded.dims == params.dims
        assert loaded.seed == params.seed
        assert all(np.array_equal(loaded.tensors[k], params.tensors[k])
                   for k in params.tensors)

    def test_garbage_rejected(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"\x04\x00\x00\x00{}xx")
        with pytest.raises(InputError):
            md.load_checkpoint(path)

    def test_truncated_payload_rejected(self, tmp_path):
        params = md.init_params(DIMS, 21)
        path = tmp_path / "model.ckpt"
        md.save_checkpoint(params, path)
        data = path.read_bytes()
        path.write_bytes(data[: len(data) - 64])
        with pytest.raises(InputError):
            md.load_checkpoint(path)
