import numpy as np
import pytest

from conftest import central_diff, rel_err, with_flat
from maskforget.nn import (
    Architecture,
    DenoiserParams,
    condition_coupling_indices,
    denoise,
    denoise_batch,
    denoise_vjp,
    init_params,
    load_checkpoint,
    save_checkpoint,
    vjp_batch,
)

T = 20


@pytest.fixture
def default_arch():
    return Architecture(data_dim=2, hidden_dims=(64, 64), cond_vocab=13, cond_embed_dim=8, time_embed_dim=8)


class TestArchitecture:
    def test_layout_contiguous(self, default_arch):
        offset = 0
        for _, off, shape in default_arch.layout():
            assert off == offset
            offset += int(np.prod(shape))
        assert offset == default_arch.n_params

    def test_param_count(self, default_arch):
        expected = 13 * 8 + (64 * 18 + 64) + (64 * 64 + 64) + (2 * 64 + 2)
        assert default_arch.n_params == expected

    @pytest.mark.parametrize("kw", [{"data_dim": 0}, {"hidden_dims": ()}, {"cond_vocab": 1}, {"hidden_dims": (4, 0)}])
    def test_rejects_bad_dims(self, kw):
        with pytest.raises(ValueError):
            Architecture(**kw)


class TestInit:
    def test_deterministic(self, default_arch):
        a, b = init_params(default_arch, 7), init_params(default_arch, 7)
        assert a.flat.tobytes() == b.flat.tobytes()
        assert a.flat.size == default_arch.n_params

    def test_biases_zero(self, default_arch):
        p = init_params(default_arch, 7)
        for name, _, _ in p.layout:
            if name.startswith("b"):
                assert np.all(p.view(name) == 0.0)

    def test_seeds_differ(self, default_arch):
        assert np.any(init_params(default_arch, 7).flat != init_params(default_arch, 8).flat)

    def test_fan_in_scale(self, default_arch):
        p = init_params(default_arch, 0)
        w = p.view("W1")
        assert abs(w.std() - np.sqrt(1 / 64)) < 0.01
        assert abs(p.view("embed").std() - 0.1) < 0.03


class TestDenoise:
    def test_shape(self, tiny_params):
        out = denoise(tiny_params, np.array([0.3, -1.0]), 5, 2, T)
        assert out.shape == (2,)
        assert np.all(np.isfinite(out))

    def test_zero_params_zero_output(self, tiny_arch):
        p = DenoiserParams(tiny_arch, np.zeros(tiny_arch.n_params))
        out = denoise_batch(p, np.ones((3, 2)), np.array([1, 5, 20]), np.array([0, 1, 4]), T)
        assert np.all(out == 0.0)

    def test_deterministic(self, tiny_params):
        x = np.array([0.1, 0.2])
        assert denoise(tiny_params, x, 3, 1, T).tobytes() == denoise(tiny_params, x, 3, 1, T).tobytes()

    def test_batch_matches_single(self, tiny_params):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((5, 2))
        t = np.array([1, 4, 9, 16, 20])
        c = np.array([0, 1, 2, 3, 4])
        out = denoise_batch(tiny_params, x, t, c, T)
        for i in range(5):
            np.testing.assert_allclose(out[i], denoise(tiny_params, x[i], int(t[i]), int(c[i]), T), rtol=0, atol=1e-14)

    @pytest.mark.parametrize("t,cond", [(0, 1), (T + 1, 1), (3, -1), (3, 5)])
    def test_out_of_range(self, tiny_params, t, cond):
        with pytest.raises(ValueError):
            denoise(tiny_params, np.zeros(2), t, cond, T)


class TestVJP:
    def test_zero_upstream(self, tiny_params):
        g = denoise_vjp(tiny_params, np.array([0.5, 0.5]), 3, 1, np.zeros(2), T)
        assert np.all(g == 0.0)

    def test_unused_embedding_rows_zero(self, tiny_params):
        g = denoise_vjp(tiny_params, np.array([0.5, -0.2]), 7, 2, np.array([1.0, -2.0]), T)
        grad = with_flat(tiny_params, g)
        emb = grad.view("embed")
        assert np.any(emb[2] != 0)
        assert np.all(np.delete(emb, 2, axis=0) == 0.0)

    def test_finite_difference(self, tiny_params):
        x, t, c, u = np.array([0.7, -0.4]), 6, 3, np.array([0.9, -1.3])

        def f(flat):
            return float(u @ denoise(with_flat(tiny_params, flat), x, t, c, T))

        fd = central_diff(f, tiny_params.flat.copy())
        g = denoise_vjp(tiny_params, x, t, c, u, T)
        assert rel_err(g, fd).max() < 1e-6

    def test_random_draws_finite_difference(self, tiny_arch):
        rng = np.random.default_rng(2024)
        worst = 0.0
        for trial in range(100):
            p = init_params(tiny_arch, trial)
            p.flat[...] += 0.3 * rng.standard_normal(p.flat.size)
            x = rng.standard_normal(2)
            t = int(rng.integers(1, T + 1))
            c = int(rng.integers(0, tiny_arch.cond_vocab))
            u = rng.standard_normal(2)

            def f(flat):
                return float(u @ denoise(with_flat(p, flat), x, t, c, T))

            worst = max(worst, rel_err(denoise_vjp(p, x, t, c, u, T), central_diff(f, p.flat.copy())).max())
        assert worst < 1e-6

    def test_linearity_in_upstream(self, tiny_params):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((4, 2))
        t = np.array([1, 2, 3, 20])
        c = np.array([0, 1, 1, 4])
        u, v = rng.standard_normal((4, 2)), rng.standard_normal((4, 2))
        a, b = 0.7, -2.5
        lhs = vjp_batch(tiny_params, x, t, c, a * u + b * v, T)
        rhs = a * vjp_batch(tiny_params, x, t, c, u, T) + b * vjp_batch(tiny_params, x, t, c, v, T)
        np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-12)

    def test_batch_is_sum_of_rows(self, tiny_params):
        rng = np.random.default_rng(9)
        x, u = rng.standard_normal((3, 2)), rng.standard_normal((3, 2))
        t, c = np.array([2, 8, 14]), np.array([4, 0, 4])
        total = sum(denoise_vjp(tiny_params, x[i], int(t[i]), int(c[i]), u[i], T) for i in range(3))
        np.testing.assert_allclose(vjp_batch(tiny_params, x, t, c, u, T), total, rtol=0, atol=1e-13)


class TestViews:
    def test_view_mutation_hits_exact_range(self, tiny_params):
        before = tiny_params.flat.copy()
        span = tiny_params.span("W0")
        tiny_params.view("W0")[...] = 42.0
        changed = np.flatnonzero(tiny_params.flat != before)
        assert set(changed) <= set(span)
        assert np.all(tiny_params.flat[span.start:span.stop] == 42.0)

    def test_condition_coupling_scope(self, tiny_arch):
        p = DenoiserParams(tiny_arch, np.zeros(tiny_arch.n_params))
        idx = condition_coupling_indices(tiny_arch)
        expected = [*p.span("embed"), *p.span("W0"), *p.span("b0")]
        assert sorted(idx.tolist()) == expected


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path, tiny_params):
        path = tmp_path / "m.ck"
        save_checkpoint(tiny_params, path)
        back = load_checkpoint(path)
        assert back.arch == tiny_params.arch
        assert back.flat.tobytes() == tiny_params.flat.tobytes()
        assert path.read_bytes()[:4] == b"MFCK"

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk"
        path.write_bytes(b"NOPE" + bytes(20))
        with pytest.raises(ValueError):
            load_checkpoint(path)
