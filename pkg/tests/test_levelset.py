import math

import numpy as np
import pytest

from lesionkit.cnn import ClassProbs
from lesionkit.errors import ContourVanishedError, ValidationError
from lesionkit.levelset import (
    LAMBDA_MAX,
    LAMBDA_MIN,
    EnergyWeights,
    PhiField,
    WindowParams,
    adaptive_window,
    evolve_step,
    init_phi_from_points,
    lambdas_from_probs,
    reinitialize,
)


def circle_sdf(shape, center, radius, band_width=3.0):
    xs = np.arange(shape[0], dtype=np.float64)[:, None]
    ys = np.arange(shape[1], dtype=np.float64)[None, :]
    grid = np.sqrt((xs - center[0]) ** 2 + (ys - center[1]) ** 2) - radius
    return PhiField(grid, band_width)


def dice2d(a, b):
    inter = np.logical_and(a, b).sum()
    total = a.sum() + b.sum()
    return 2.0 * inter / total if total else 1.0


class TestInitPhi:
    def test_center_and_radius(self):
        phi = init_phi_from_points((10, 10), (20, 20), (40, 40))
        r = math.sqrt(200) / 2
        assert phi.grid[15, 15] == pytest.approx(-r)

    def test_zero_on_circle(self):
        phi = init_phi_from_points((10, 20), (30, 20), (50, 40))
        # Scan-line rasterization of the circle: one coordinate exact, the
        # other rounded, so every point is within half a voxel of the circle.
        r, cx, cy = 10.0, 20, 20
        for x in range(cx - 10, cx + 11):
            h = math.sqrt(max(r**2 - (x - cx) ** 2, 0.0))
            for y in (round(cy + h), round(cy - h)):
                assert abs(phi.grid[x, y]) < 0.51
        for y in range(cy - 10, cy + 11):
            h = math.sqrt(max(r**2 - (y - cy) ** 2, 0.0))
            for x in (round(cx + h), round(cx - h)):
                assert abs(phi.grid[x, y]) < 0.51

    def test_coincident_points_rejected(self):
        with pytest.raises(ValidationError):
            init_phi_from_points((5, 5), (5, 5), (20, 20))


class TestLambdas:
    def test_uniform_probs(self):
        w = lambdas_from_probs(ClassProbs(1 / 3, 1 / 3, 1 / 3))
        assert w.lam1 == pytest.approx(math.exp(1.25), abs=1e-9)
        assert w.lam2 == pytest.approx(math.exp(1.25), abs=1e-9)

    def test_deep_inside_expands(self):
        w = lambdas_from_probs(ClassProbs(1.0, 0.0, 0.0))
        assert w.lam1 == pytest.approx(math.exp(0.5), abs=1e-9)
        assert w.lam2 == pytest.approx(math.exp(2.0), abs=1e-9)
        assert w.lam2 > w.lam1

    def test_far_outside_contracts(self):
        w = lambdas_from_probs(ClassProbs(0.0, 0.0, 1.0))
        assert w.lam1 == pytest.approx(math.exp(2.0), abs=1e-9)
        assert w.lam2 == pytest.approx(math.exp(0.5), abs=1e-9)
        assert w.lam1 > w.lam2

    def test_bounds_and_direction_law(self):
        rng = np.random.default_rng(77)
        raw = rng.dirichlet(np.ones(3), size=20000)
        for p1, p2, p3 in raw:
            w = lambdas_from_probs(ClassProbs(p1, p2, p3))
            assert LAMBDA_MIN - 1e-12 <= w.lam1 <= LAMBDA_MAX + 1e-12
            assert LAMBDA_MIN - 1e-12 <= w.lam2 <= LAMBDA_MAX + 1e-12
            if p1 > p3:
                assert w.lam2 > w.lam1
            elif p3 > p1:
                assert w.lam1 > w.lam2

    def test_off_simplex_rejected(self):
        bad = ClassProbs.__new__(ClassProbs)
        object.__setattr__(bad, "p1", 0.6)
        object.__setattr__(bad, "p2", 0.6)
        object.__setattr__(bad, "p3", -0.2)
        with pytest.raises(ValidationError):
            lambdas_from_probs(bad)


class TestAdaptiveWindow:
    def test_homogeneous(self):
        assert adaptive_window(20, 1.0).side == 9

    def test_textured(self):
        assert adaptive_window(20, 0.5).side == 13

    def test_clamp_floor(self):
        for h in (1.0, 0.5, 0.1):
            assert adaptive_window(4, h).side == 5

    def test_clamp_ceiling(self):
        assert adaptive_window(200, 0.2).side == 41

    def test_validation(self):
        with pytest.raises(ValidationError):
            adaptive_window(1, 0.5)
        with pytest.raises(ValidationError):
            adaptive_window(20, 0.0)
        with pytest.raises(ValidationError):
            WindowParams(6, 1.5)


class TestEvolveStep:
    def test_stationary_disk(self):
        shape = (60, 60)
        img = np.where(circle_sdf(shape, (30, 30), 12).grid <= 0, 100.0, 0.0)
        phi = circle_sdf(shape, (30, 30), 12)
        before = phi.inside
        w = EnergyWeights(3.0, 3.0, 0.3)
        win = WindowParams(9, 1.0)
        for _ in range(50):
            phi = evolve_step(phi, img, w, win)
        assert dice2d(before, phi.inside) >= 0.99

    def test_uniform_image_lam2_expands(self):
        shape = (50, 50)
        rng = np.random.default_rng(3)
        img = rng.normal(50.0, 2.0, size=shape)
        phi = circle_sdf(shape, (25, 25), 8)
        w = EnergyWeights(1.0, 4.0, 0.0)
        win = WindowParams(9, 1.0)
        radii = [math.sqrt(phi.inside.sum() / math.pi)]
        for _ in range(20):
            phi = evolve_step(phi, img, w, win)
            radii.append(math.sqrt(phi.inside.sum() / math.pi))
        diffs = np.diff(radii)
        assert np.all(diffs >= 0)
        assert radii[-1] > radii[0]

    def test_curvature_only_circle_shrinks(self):
        shape = (50, 50)
        img = np.full(shape, 10.0)
        phi = circle_sdf(shape, (25, 25), 15)
        w = EnergyWeights(1e-12, 1e-12, 1.0)
        win = WindowParams(9, 1.0)
        areas = [phi.inside.sum()]
        for i in range(60):
            phi = evolve_step(phi, img, w, win)
            if (i + 1) % 20 == 0:
                phi = reinitialize(phi)
            areas.append(phi.inside.sum())
        assert areas[-1] < areas[0]
        assert np.all(np.diff(areas) <= 0)

    def test_step_bounded(self):
        shape = (40, 40)
        rng = np.random.default_rng(5)
        img = rng.normal(0, 50, size=shape)
        phi = circle_sdf(shape, (20, 20), 9)
        w = EnergyWeights(5.0, 2.0, 1.0)
        new = evolve_step(phi, img, w, WindowParams(7, 1.0), dt=0.45)
        assert np.abs(new.grid - phi.grid).max() <= 0.45 + 1e-12

    def test_vanished_contour_signalled(self):
        phi = PhiField(np.full((20, 20), 5.0))
        with pytest.raises(ContourVanishedError):
            evolve_step(phi, np.zeros((20, 20)), EnergyWeights(1, 1, 0),
                        WindowParams(5, 1.0))


class TestReinitialize:
    def test_idempotent_on_circle_sdf(self):
        phi = circle_sdf((60, 60), (30, 30), 14)
        out = reinitialize(phi)
        band = np.abs(phi.grid) <= phi.band_width
        assert np.abs(out.grid - phi.grid)[band].max() < 0.1

    def test_scaled_input_restored(self):
        phi = circle_sdf((60, 60), (30, 30), 14)
        scaled = PhiField(3.0 * phi.grid, phi.band_width)
        out = reinitialize(scaled)
        band = np.abs(out.grid) <= out.band_width
        interior_band = band.copy()
        interior_band[0, :] = interior_band[-1, :] = False
        interior_band[:, 0] = interior_band[:, -1] = False
        gx = np.gradient(out.grid, axis=0)
        gy = np.gradient(out.grid, axis=1)
        gm = np.sqrt(gx**2 + gy**2)
        assert gm[interior_band].min() >= 0.9
        assert gm[interior_band].max() <= 1.1

    def test_zero_set_preserved_on_blobby_field(self):
        rng = np.random.default_rng(11)
        xs = np.arange(80)[:, None]
        ys = np.arange(80)[None, :]
        grid = np.full((80, 80), 30.0)
        for _ in range(4):
            cx, cy = rng.uniform(20, 60, size=2)
            r = rng.uniform(8, 14)
            d = np.sqrt((xs - cx) ** 2 + (ys - cy) ** 2) - r
            grid = np.minimum(grid, d)
        phi = PhiField(2.0 * grid + 0.3)
        out = reinitialize(phi)
        assert dice2d(phi.inside, out.inside) >= 0.99

    def test_no_crossing_raises(self):
        with pytest.raises(ContourVanishedError):
            reinitialize(PhiField(np.ones((10, 10))))
