"""Synthetic plant world tests: determinism, model health, regression oracles."""

import numpy as np
import pytest

from airpath_mpc.config import GRID_IDS, ToolkitConfig
from airpath_mpc.engine import (
    ExcitationTrace,
    OperatingPoint,
    PlantState,
    RankDeficient,
    TooFewSamples,
    empirical_disturbance,
    estimate_disturbance_set,
    identify_lti,
    interpolate_trims,
    lattice_indices,
    make_excitation,
    nearest_grid,
    one_step_residuals,
    plant_step,
    roman_id,
    synth_grid,
)


@pytest.fixture(scope="module")
def grid():
    return synth_grid(1)


@pytest.fixture(scope="module")
def cfg():
    return ToolkitConfig()


class TestSynth:
    def test_same_seed_bit_identical(self, grid):
        other = synth_grid(1)
        for m1, m2 in zip(grid.models, other.models):
            np.testing.assert_array_equal(m1.A, m2.A)
            np.testing.assert_array_equal(m1.B, m2.B)
            np.testing.assert_array_equal(m1.trim_x, m2.trim_x)
        for d1, d2 in zip(grid.disturbance, other.disturbance):
            np.testing.assert_array_equal(d1.half_width, d2.half_width)

    def test_different_seed_differs(self, grid):
        other = synth_grid(2)
        assert not np.allclose(grid.models[0].A, other.models[0].A)

    def test_all_spectral_radii_below_one(self, grid):
        for m in grid.models:
            assert m.spectral_radius() < 1.0

    def test_all_models_stabilizable_and_controllable(self, grid):
        for m in grid.models:
            assert m.is_stabilizable()
            assert m.is_controllable()

    def test_trim_output_consistency(self, grid):
        for m in grid.models:
            np.testing.assert_allclose(m.trim_y, m.C @ m.trim_x, atol=1e-12)

    def test_trims_monotone_in_fuel_for_boost(self, grid):
        for si in range(3):
            p_vals = [grid.model(roman_id(si, fi)).trim_x[0] for fi in range(4)]
            assert np.all(np.diff(p_vals) > 0)

    def test_dominant_time_constants_in_range(self, grid):
        for m in grid.models:
            eigs = np.abs(np.linalg.eigvals(m.A))
            slowest = grid.Ts / -np.log(eigs.max())
            assert 0.1 <= slowest <= 2.5

    def test_lattice_labels(self):
        assert roman_id(0, 3) == "I"
        assert roman_id(2, 2) == "X"
        assert lattice_indices("X") == (2, 2)
        assert lattice_indices("XII") == (2, 0)


class TestNearestGrid:
    def test_exact_grid_point(self, grid):
        assert nearest_grid(grid, grid.point("X")) == "X"

    def test_just_inside_cell(self, grid):
        pt = grid.point("VI")
        op = OperatingPoint(pt.speed + 1.0, pt.fuel - 0.05)
        assert nearest_grid(grid, op) == "VI"

    def test_tie_breaks_to_lower_roman_index(self, grid):
        a, b = grid.point("V"), grid.point("VI")
        mid = OperatingPoint(0.5 * (a.speed + b.speed), 0.5 * (a.fuel + b.fuel))
        assert nearest_grid(grid, mid) == "V"


class TestTrimInterpolation:
    def test_exact_at_grid_point(self, grid):
        m = grid.model("V")
        tx, tu, ty = interpolate_trims(grid, grid.point("V"))
        np.testing.assert_allclose(tx, m.trim_x, atol=1e-12)
        np.testing.assert_allclose(tu, m.trim_u, atol=1e-12)
        np.testing.assert_allclose(ty, m.trim_y, atol=1e-12)

    def test_cell_center_is_corner_mean(self, grid):
        corners = ["V", "VI", "IX", "X"]
        pts = [grid.point(g) for g in corners]
        center = OperatingPoint(np.mean([p.speed for p in pts]),
                                np.mean([p.fuel for p in pts]))
        tx, tu, _ = interpolate_trims(grid, center)
        np.testing.assert_allclose(
            tx, np.mean([grid.model(g).trim_x for g in corners], axis=0),
            atol=1e-10)
        np.testing.assert_allclose(
            tu, np.mean([grid.model(g).trim_u for g in corners], axis=0),
            atol=1e-10)

    def test_edge_midpoint_is_two_corner_mean(self, grid):
        a, b = grid.point("VI"), grid.point("X")
        mid = OperatingPoint(0.5 * (a.speed + b.speed), a.fuel)
        tx, _, _ = interpolate_trims(grid, mid)
        expect = 0.5 * (grid.model("VI").trim_x + grid.model("X").trim_x)
        np.testing.assert_allclose(tx, expect, atol=1e-10)

    def test_continuous_across_cell_boundary(self, grid):
        a, b = grid.point("VI"), grid.point("X")
        s_edge = b.speed
        f = a.fuel - 3.0
        left = interpolate_trims(grid, OperatingPoint(s_edge - 1e-9, f))
        right = interpolate_trims(grid, OperatingPoint(s_edge + 1e-9, f))
        np.testing.assert_allclose(left[0], right[0], atol=1e-6)


class TestPlant:
    def test_equilibrium_at_trim_without_warp(self, grid):
        g2 = synth_grid(1)
        g2.eta_max = np.zeros(4)
        m = g2.model("VI")
        st = plant_step(PlantState(m.trim_x), m.trim_u, g2.point("VI"),
                        np.zeros(4), g2)
        np.testing.assert_allclose(st.x, m.trim_x, atol=1e-12)

    def test_matches_grid_model_at_grid_point_without_warp(self, grid):
        g2 = synth_grid(1)
        g2.eta_max = np.zeros(4)
        m = g2.model("VII")
        rng = np.random.default_rng(0)
        x = m.trim_x + rng.normal(size=4)
        u = np.clip(m.trim_u + rng.normal(size=3), 0, 100)
        st = plant_step(PlantState(x), u, g2.point("VII"), np.zeros(4), g2)
        np.testing.assert_allclose(st.x, m.predict(x, u), atol=1e-10)

    def test_mismatch_inside_inflated_disturbance_set(self, grid, cfg):
        # mid-cell one-step error of the nearest-grid model stays in 1.5 W^g
        rng = np.random.default_rng(42)
        x_span = cfg.plant.sampling_span * (
            np.asarray(cfg.constraints.x_upper) - np.asarray(cfg.constraints.x_lower))
        pts = [grid.point(g) for g in ["VI", "VII", "X", "XI"]]
        count = 0
        for _ in range(10_000 // 4):
            for pt in pts:
                op = OperatingPoint(
                    pt.speed + rng.uniform(-0.45, 0.45) * (grid.speeds[1] - grid.speeds[0]),
                    pt.fuel + rng.uniform(-0.45, 0.45) * (grid.fuels[1] - grid.fuels[0]))
                op = grid.clamp(op)
                gid = nearest_grid(grid, op)
                model = grid.model(gid)
                tx, tu, _ = interpolate_trims(grid, op)
                x = tx + rng.uniform(-1, 1, size=4) * x_span
                u = np.clip(tu + rng.uniform(-12, 12, size=3), 0, 100)
                truth = plant_step(PlantState(x), u, op, np.zeros(4), grid)
                err = np.abs(truth.x - model.predict(x, u))
                hw = grid.disturbance_set(gid).half_width
                assert (err <= 1.5 * hw + 1e-12).all()
                count += 1
        assert count >= 9000

    def test_saturates_input(self, grid, caplog):
        m = grid.model("I")
        with caplog.at_level("WARNING"):
            st = plant_step(PlantState(m.trim_x), [150.0, -5.0, 50.0],
                            grid.point("I"), np.zeros(4), grid)
        assert np.isfinite(st.x).all()


class TestIdentification:
    def test_recovers_noiseless_lti_exactly(self, grid):
        m = grid.model("VI")
        rng = np.random.default_rng(4)
        T = 500
        du = rng.choice([-3.0, 3.0], size=(T, 3))
        dx = np.zeros((T + 1, 4))
        for k in range(T):
            dx[k + 1] = m.A @ dx[k] + m.B @ du[k]
        trace = ExcitationTrace(
            np.arange(T) * grid.Ts, du + m.trim_u, dx + m.trim_x,
            (dx[:-1] @ m.C.T + du @ m.D.T) + m.trim_y, grid.point("VI"))
        fit, diag = identify_lti(trace, m.trim_x, m.trim_u, m.trim_y)
        assert np.linalg.norm(fit.A - m.A) < 1e-6
        assert np.linalg.norm(fit.B - m.B) < 1e-6

    def test_recovers_grid_model_from_clean_plant(self, grid):
        g2 = synth_grid(1)
        g2.eta_max = np.zeros(4)
        trace = make_excitation(g2, "VI", 600, seed=9)
        m = g2.model("VI")
        fit, _ = identify_lti(trace, m.trim_x, m.trim_u, m.trim_y)
        assert np.linalg.norm(fit.A - m.A, ord="fro") < 1e-4
        assert np.linalg.norm(fit.B - m.B, ord="fro") < 1e-4

    def test_heldout_rmse_reasonable_with_noise(self, grid, cfg):
        trace = make_excitation(grid, "VI", 600, seed=9,
                                noise_half_width=cfg.plant.noise_half_width)
        m = grid.model("VI")
        fit, diag = identify_lti(trace, m.trim_x, m.trim_u, m.trim_y)
        assert (diag.test_rmse <= 2.0 * np.maximum(diag.train_rmse, 1e-3)).all()

    def test_too_short_trace_rejected(self, grid):
        m = grid.model("I")
        trace = make_excitation(grid, "I", 100, seed=1)
        with pytest.raises(RankDeficient):
            identify_lti(trace, m.trim_x, m.trim_u, m.trim_y)


class TestDisturbanceSet:
    def test_zero_residuals(self):
        hc = estimate_disturbance_set(np.zeros((150, 4)))
        np.testing.assert_array_equal(hc.half_width, np.zeros(4))

    def test_max_abs_per_channel(self):
        res = np.zeros((120, 4))
        res[3, 0] = 0.3
        res[7, 0] = -0.25
        hc = estimate_disturbance_set(res)
        assert hc.half_width[0] == pytest.approx(0.3)
        assert hc.half_width[1] == 0.0

    def test_too_few_samples(self):
        with pytest.raises(TooFewSamples):
            estimate_disturbance_set(np.zeros((99, 4)))

    def test_containment_on_seeded_run(self, grid, cfg):
        W_emp, _, _, res = empirical_disturbance(
            grid, "VI", seed=5, noise_half_width=cfg.plant.noise_half_width)
        for r in res:
            assert W_emp.contains(r, tol=1e-12)
