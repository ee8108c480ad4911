import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dipgs import diffkit as dk
from dipgs.render import (
    RenderSettings,
    composite,
    project,
    render,
    splat,
    splat_covariance,
)
from dipgs.scene import Camera, GaussianSet, color_to_sh

from oracles import render_loops

NO_CUTOFF = RenderSettings(cutoff=False)


def identity_camera(size=8, f=10.0, near=0.01):
    return Camera(np.eye(4), f, f, (size - 1) / 2, (size - 1) / 2, size, size, near)


def random_set(rng, n, spread=0.5):
    return GaussianSet(
        means=rng.uniform(-spread, spread, size=(n, 3)),
        scales=np.exp(rng.uniform(np.log(0.05), np.log(0.4), size=(n, 3))),
        rotations=rng.normal(size=(n, 4)),
        opacities=rng.uniform(0.05, 0.99, size=(n, 1)),
        sh=rng.normal(0, 1.0, size=(n, 3)),
    )


def random_camera(rng, size=8):
    eye = rng.normal(size=3)
    eye = 3.0 * eye / np.linalg.norm(eye)
    return Camera.look_at(eye, rng.uniform(-0.2, 0.2, size=3), width=size, height=size,
                          fov_deg=rng.uniform(30, 60))


def single(mean, scale, color, opacity):
    return GaussianSet(np.array([mean], float), np.full((1, 3), scale), np.array([[1.0, 0, 0, 0]]),
                       np.array([[opacity]]), color_to_sh(np.array([color], float)))


class TestProject:
    def test_on_axis(self):
        cam = identity_camera()
        assert project([0.0, 0.0, 2.5], cam) == (cam.cx, cam.cy, 2.5)

    def test_pinhole(self):
        cam = Camera(np.eye(4), 100.0, 100.0, 32.0, 32.0, 64, 64)
        u, v, d = project([0.1, 0.0, 1.0], cam)
        assert u == pytest.approx(42.0, abs=1e-12) and v == 32.0 and d == 1.0

    def test_culled(self):
        cam = identity_camera(near=0.2)
        assert project([0.0, 0.0, 0.1], cam) is None


class TestSplatCovariance:
    def test_isotropic_on_axis(self):
        cam = Camera(np.eye(4), 50.0, 50.0, 4, 4, 8, 8)
        sigma = 0.1
        out = splat_covariance(sigma ** 2 * np.eye(3), cam, np.array([0.0, 0.0, 1.0])).data
        np.testing.assert_allclose(out, (50.0 ** 2 * sigma ** 2 + 0.3) * np.eye(2), rtol=1e-14)

    def test_symmetric(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            a = rng.normal(size=(3, 3))
            p = rng.normal(size=3) + [0, 0, 4]
            out = splat_covariance(a @ a.T, random_camera(rng), p).data
            assert abs(out[0, 1] - out[1, 0]) < 1e-12

    def test_numerical_jacobian_oracle(self):
        rng = np.random.default_rng(1)
        cam = random_camera(rng, 16)
        a = rng.normal(size=(3, 3))
        sigma = a @ a.T * 0.01
        p = np.array([0.3, -0.2, 3.0])

        def proj(q):
            return np.array([cam.fx * q[0] / q[2] + cam.cx, cam.fy * q[1] / q[2] + cam.cy])

        h = 1e-6
        jac = np.stack([(proj(p + h * e) - proj(p - h * e)) / (2 * h) for e in np.eye(3)], axis=1)
        w = cam.rotation
        expected = jac @ w @ sigma @ w.T @ jac.T
        got = splat_covariance(sigma, cam, p).data - 0.3 * np.eye(2)
        np.testing.assert_allclose(got, expected, atol=1e-6)

    def test_dilation_floor(self):
        rng = np.random.default_rng(2)
        g = random_set(rng, 20)
        sp = splat(g, random_camera(rng, 16))
        eig = np.linalg.eigvalsh(sp.cov2d.data)
        assert (eig >= 0.3 - 1e-12).all()
        assert (sp.depth > 0).all()


class TestRender:
    def test_empty_is_background(self):
        img = render(GaussianSet.empty(), identity_camera(), (0.2, 0.4, 0.6)).pixels
        np.testing.assert_array_equal(img, np.broadcast_to([0.2, 0.4, 0.6], (8, 8, 3)))

    def test_centred_pixel(self):
        cam = identity_camera()
        # mean projects to pixel (3, 3): u = 10 * x / 2 + 3.5 = 3
        g = single([-0.1, -0.1, 2.0], 0.05, [0.9, 0.3, 0.1], 0.6)
        bg = np.array([0.1, 0.2, 0.7])
        img = render(g, cam, bg).pixels
        np.testing.assert_allclose(img[3, 3], 0.6 * np.array([0.9, 0.3, 0.1]) + 0.4 * bg, atol=1e-15)

    def test_front_opaque_hides_back(self):
        cam = identity_camera()
        front = single([0.0, 0.0, 1.0], 2.0, [1.0, 0.0, 0.0], 1.0)
        back = single([0.0, 0.0, 3.0], 2.0, [0.0, 1.0, 0.0], 1.0)
        both = GaussianSet(*(np.concatenate([getattr(back, f), getattr(front, f)]) for f in front.fields()))
        img = render(both, cam, (0.0, 0.0, 1.0)).pixels
        assert np.abs(img[4, 4] - [1.0, 0.0, 0.0]).max() <= 0.01 + 1e-12
        assert img[4, 4, 1] <= 0.01 * 0.99 + 1e-12

    @pytest.mark.parametrize("seed", range(25))
    def test_oracle(self, seed):
        rng = np.random.default_rng(seed)
        g = random_set(rng, int(rng.integers(1, 6)))
        cam = random_camera(rng)
        bg = rng.uniform(0, 1, size=3)
        img = render(g, cam, bg, NO_CUTOFF).pixels
        ref = render_loops(g.means, g.scales, g.rotations, g.opacities, g.sh, cam, bg)
        assert np.abs(img - ref).max() < 1e-9

    @pytest.mark.parametrize("seed", range(10))
    def test_permutation_bit_exact(self, seed):
        rng = np.random.default_rng(100 + seed)
        g = random_set(rng, 30)
        cam = random_camera(rng, 16)
        perm = rng.permutation(30)
        for s in (NO_CUTOFF, RenderSettings()):
            a = render(g, cam, (0.3, 0.3, 0.3), s).pixels
            b = render(g.subset(perm), cam, (0.3, 0.3, 0.3), s).pixels
            assert np.array_equal(a, b)

    def test_equal_depth_uses_source_order(self):
        cam = identity_camera()
        a = single([0.0, 0.0, 2.0], 1.0, [1.0, 0.0, 0.0], 0.5)
        b = single([0.0, 0.0, 2.0], 1.0, [0.0, 0.0, 1.0], 0.5)
        ab = GaussianSet(*(np.concatenate([getattr(a, f), getattr(b, f)]) for f in a.fields()))
        ba = GaussianSet(*(np.concatenate([getattr(b, f), getattr(a, f)]) for f in a.fields()))
        pa, pb = render(ab, cam).pixels[4, 4], render(ba, cam).pixels[4, 4]
        # first listed Gaussian is composited first and dominates
        assert pa[0] > pa[2] and pb[2] > pb[0]

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2 ** 32 - 1), n=st.integers(0, 12))
    def test_gamut(self, seed, n):
        rng = np.random.default_rng(seed)
        g = random_set(rng, n) if n else GaussianSet.empty()
        img = render(g, random_camera(rng), rng.uniform(0, 1, size=3)).pixels
        assert img.min() >= 0.0 and img.max() <= 1.0

    def test_behind_camera_culled(self):
        cam = identity_camera()
        g = single([0.0, 0.0, -2.0], 1.0, [1.0, 1.0, 1.0], 0.9)
        np.testing.assert_array_equal(render(g, cam).pixels, np.zeros((8, 8, 3)))

    def test_cutoff_matches_oracle_closely(self):
        rng = np.random.default_rng(7)
        g = random_set(rng, 5, spread=0.3)
        cam = random_camera(rng)
        a = render(g, cam, (0, 0, 0)).pixels
        b = render(g, cam, (0, 0, 0), NO_CUTOFF).pixels
        # the bounding square drops only the far tail: o * exp(-4.5) < 1.2e-2 per Gaussian
        assert np.abs(a - b).max() < 5 * 1.2e-2


class TestTransmittance:
    @pytest.mark.parametrize("seed", range(5))
    def test_monotone_in_unit_interval(self, seed):
        rng = np.random.default_rng(seed)
        k = 6
        mean2d = rng.uniform(0, 8, size=(k, 2))
        conics = np.stack([np.full(k, 0.3), np.zeros(k), np.full(k, 0.3)], axis=1)
        opacity = rng.uniform(0.1, 1.0, size=k)
        # with white colours and black background the image is 1 - T_final;
        # adding Gaussians one at a time must never raise T
        prev = np.ones((8, 8))
        for m in range(1, k + 1):
            img = composite(mean2d[:m], conics[:m], opacity[:m], np.ones((m, 3)), np.zeros(3), 8, 8,
                            settings=NO_CUTOFF).data
            t = 1.0 - img[:, :, 0]
            assert (t >= -1e-15).all() and (t <= 1.0).all()
            assert (t <= prev + 1e-15).all()
            prev = t

    def test_early_stop(self):
        # 10 near-opaque layers: T drops below 1e-4 after two, later layers contribute nothing
        k = 10
        mean2d = np.zeros((k, 2))
        conics = np.tile([1e-6, 0.0, 1e-6], (k, 1))
        colors = np.zeros((k, 3))
        colors[5:] = 1.0
        img = composite(mean2d, conics, np.ones(k), colors, np.zeros(3), 2, 2, settings=NO_CUTOFF).data
        assert img.max() == 0.0


class TestRenderGradients:
    @pytest.mark.parametrize("cutoff", [False, True])
    def test_photometric_gradients(self, cutoff):
        from dipgs.losses import photometric

        rng = np.random.default_rng(3)
        fields = dict(means=rng.uniform(-0.3, 0.3, size=(3, 3)), scales=rng.uniform(0.15, 0.35, size=(3, 3)),
                      rotations=rng.normal(size=(3, 4)), opacities=rng.uniform(0.4, 0.9, size=(3, 1)),
                      sh=rng.normal(0, 0.5, size=(3, 3)))
        params = {k: dk.Tensor(v, requires_grad=True) for k, v in fields.items()}
        g = GaussianSet(**params)
        cam = Camera.look_at([0.3, -3.0, 0.8], [0, 0, 0], width=8, height=8)
        target = rng.uniform(0, 1, size=(8, 8, 3))
        s = RenderSettings(cutoff=cutoff)
        errs = dk.check_gradients(lambda: photometric(render(g, cam, (0.1, 0.1, 0.1), s).image, target),
                                  list(params.values()), step=1e-6)
        assert max(errs) < 1e-4
