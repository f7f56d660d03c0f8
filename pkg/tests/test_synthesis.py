"""
Tests for the state lattice and backward recursion
"""

import math
from itertools import product

import numpy as np
import pytest

from agents.controller import run_controller
from core.ess import EssState, grid_envelope, step
from core.household import Trace
from core.inference import CostMatrix, belief_update, min_risk_stage, project_belief
from core.synthesis import (
    OptimizerConfig,
    StateSpace,
    SynthesisError,
    backward_recursion,
    brute_force_policy_search,
    energy_grid,
    optimize_stage,
    project_to_simplex,
    resolve_ties,
    successor_distribution,
)


def _vertex(space, hypothesis):
    """Lattice index of the belief certain of one hypothesis"""
    return int(np.flatnonzero(space.belief_grid.points[:, hypothesis] == 1.0)[0])


def _enumerated_successors(space, pi_index, z_index, mu):
    """Successor masses by looping over (g, h, g', x', x, y) and clipping each action"""
    model = space.model
    pi = space.belief_grid.points[pi_index]
    z = space.energy_grid[z_index]
    env = grid_envelope(EssState(z), space.params, space.q, space.d_min, space.d_max)
    n_h = model.hypothesis_count
    n_x = len(space.observation_grid)
    n_y = len(space.output_grid)

    masses = {}
    for g, h, g_prev, x_prev, xi, yi in product(range(n_h), range(n_h), range(n_h), range(n_x), range(n_x), range(n_y)):
        reading = pi[g] * model.transition[h, g] * model.emission[xi, h]
        requested = pi[g_prev] * model.emission[x_prev, g_prev] * mu[x_prev, yi]
        if reading * requested == 0.0:
            continue
        x = float(space.observation_grid[xi])
        d = min(max(float(space.output_grid[yi]) - x, env.d_lo), env.d_hi)
        next_pi = project_belief(belief_update(pi, x, model), space.belief_grid)
        z_next = step(EssState(z), d, space.params).z
        next_z = min(max(math.floor(z_next / space.e + 0.5), 0), len(space.energy_grid) - 1)
        key = (x, x + d, next_pi, next_z)
        masses[key] = masses.get(key, 0.0) + reading * requested
    return masses


@pytest.mark.unit
class TestStateSpace:
    """Lattice construction"""

    def test_energy_grid(self):
        """Five Wh steps over 1200 Wh"""
        grid = energy_grid(5.0, 1200.0)
        assert len(grid) == 241
        assert grid[-1] == 1200.0

    def test_desk_scale_cardinalities(self, kettle_model, desk_params):
        """Kettle household with a desk battery and a +-1000 W action range"""
        space = StateSpace(kettle_model, desk_params, e=5.0, belief_resolution=11, d_min=-1000.0, d_max=1000.0)
        assert space.cardinalities() == {
            'observations': 4,
            'outputs': 8,
            'energy_levels': 241,
            'beliefs': 11,
            'hypotheses': 2,
        }
        assert space.output_grid[0] == -1000.0
        assert space.output_grid[-1] == 2500.0

    def test_tiny_lattice(self, tiny_space):
        """Three outputs, three energy levels, three beliefs"""
        assert tiny_space.shape == (3, 3, 2, 3)
        assert tiny_space.output_grid.tolist() == [-500.0, 0.0, 500.0]
        assert tiny_space.idle_output.tolist() == [1, 2]

    def test_only_full_store_discharges(self, tiny_space):
        """Half a grid step of stored energy is not enough to discharge"""
        assert [env.d_lo for env in tiny_space.envelopes] == [0.0, 0.0, -500.0]
        assert not tiny_space.output_mask[0, 0]
        assert tiny_space.output_mask[2, 0]

    def test_successor_tables_stay_in_envelope(self, kettle_model, desk_params):
        """Effective outputs differ from the reading by an admissible action"""
        space = StateSpace(kettle_model, desk_params, e=100.0, belief_resolution=3, d_min=-1000.0, d_max=1000.0)
        for zi, z in enumerate(space.energy_grid):
            env = grid_envelope(EssState(z), desk_params, space.q, -1000.0, 1000.0)
            for xi, x in enumerate(space.observation_grid):
                d = space.output_grid[space.effective_output[zi, xi]] - x
                assert np.all(d >= env.d_lo - 1e-9)
                assert np.all(d <= env.d_hi + 1e-9)

    def test_range_must_be_on_grid(self, tiny_model, tiny_params):
        """Action range bounds are multiples of q"""
        with pytest.raises(ValueError, match="multiple"):
            StateSpace(tiny_model, tiny_params, e=8.0, belief_resolution=3, d_min=-250.0, d_max=0.0)

    def test_range_must_contain_idle(self, tiny_model, tiny_params):
        """Idle is always admissible"""
        with pytest.raises(ValueError, match="idle"):
            StateSpace(tiny_model, tiny_params, e=8.0, belief_resolution=3, d_min=500.0, d_max=1000.0)

    def test_deterministic_kernel_limit(self, tiny_space):
        """Enumeration refuses oversized kernel sets"""
        assert tiny_space.deterministic_kernels(100).shape == (9, 2)
        with pytest.raises(ValueError, match="exceed"):
            tiny_space.deterministic_kernels(8)

    def test_digest_tracks_resolution(self, tiny_model, tiny_params, tiny_space):
        """Different lattices have different digests"""
        finer = StateSpace(tiny_model, tiny_params, e=8.0, belief_resolution=5, d_min=-500.0, d_max=0.0)
        assert finer.digest() != tiny_space.digest()


@pytest.mark.unit
class TestProjectToSimplex:
    """Masked Euclidean projection"""

    def test_rows_are_distributions(self):
        """Projected rows sum to one and vanish off the mask"""
        rng = np.random.default_rng(3)
        v = rng.normal(size=(50, 6))
        mask = rng.random((50, 6)) < 0.6
        mask[:, 0] = True
        projected = project_to_simplex(v, mask)
        assert projected.sum(axis=1) == pytest.approx(np.ones(50))
        assert np.all(projected[~mask] == 0.0)
        assert np.all(projected >= 0.0)

    def test_simplex_points_are_fixed(self):
        """Points already on the simplex are unchanged"""
        v = np.array([[0.2, 0.0, 0.8], [0.0, 1.0, 0.0]])
        mask = np.array([[True, False, True], [True, True, True]])
        assert project_to_simplex(v, mask) == pytest.approx(v)

    def test_single_admissible_entry(self):
        """A one-entry mask projects onto that vertex"""
        projected = project_to_simplex(np.array([[5.0, -2.0, 3.0]]), np.array([[False, True, False]]))
        assert projected.tolist() == [[0.0, 1.0, 0.0]]


@pytest.mark.unit
class TestOptimizeStage:
    """Single-stage kernel search"""

    def test_kernels_are_stochastic_and_admissible(self, tiny_space, costs):
        """Every kernel row is a distribution over admissible outputs"""
        objective = tiny_space.stage_objective(1, costs)
        solution = optimize_stage(objective, OptimizerConfig(starts=3, iterations=30))
        assert solution.kernels.sum(axis=-1) == pytest.approx(np.ones((3, 2)))
        outside = ~np.broadcast_to(tiny_space.output_mask[:, None, :], solution.kernels.shape)
        assert np.all(solution.kernels[outside] == 0.0)

    def test_search_never_loses_to_enumeration(self, tiny_space, costs, exact_optimizer):
        """Stochastic search only replaces strictly better kernels"""
        objective = tiny_space.stage_objective(1, costs)
        exact = optimize_stage(objective, exact_optimizer)
        searched = optimize_stage(objective, OptimizerConfig(starts=4, iterations=50))
        assert np.all(searched.values >= exact.values - 1e-12)

    def test_enumeration_limit(self, tiny_space, costs):
        """Oversized enumerations are refused"""
        objective = tiny_space.stage_objective(0, costs)
        with pytest.raises(ValueError, match="exceed"):
            optimize_stage(objective, OptimizerConfig(max_deterministic_kernels=4))


@pytest.mark.unit
class TestBackwardRecursion:
    """Finite-horizon recursion"""

    def test_values_accumulate(self, tiny_space, costs, exact_optimizer):
        """Earlier stages carry at least the value of later ones"""
        policy, values = backward_recursion(tiny_space, costs, horizon=3, config=exact_optimizer)
        assert policy.shape == (3, 3, 3, 2, 3)
        assert np.all(values.values[0] >= values.values[1] - 1e-12)
        assert np.all(values.values[1] >= values.values[2] - 1e-12)
        assert np.all(policy.stage_risk >= 0.0)

    def test_policy_kernels(self, tiny_space, costs, exact_optimizer):
        """Stored kernels are row-stochastic and carry the lattice identity"""
        policy, _ = backward_recursion(tiny_space, costs, horizon=2, config=exact_optimizer)
        assert policy.kernels.sum(axis=-1) == pytest.approx(np.ones(policy.shape[:-1]))
        assert policy.model_digest == tiny_space.model.digest()
        assert policy.ess_digest == tiny_space.params.digest()
        assert policy.kernel(1, 0, 0).shape == (2, 3)
        assert policy.horizon == 2

    def test_matches_brute_force(self, tiny_space, costs, exact_optimizer):
        """Two-stage recursion equals exhaustive expectimax"""
        _, values = backward_recursion(tiny_space, costs, horizon=2, config=exact_optimizer)
        oracle = brute_force_policy_search(tiny_space, costs, horizon=2)
        np.testing.assert_allclose(values.values, oracle.values, atol=1e-9)

    @pytest.mark.slow
    def test_matches_brute_force_three_stages(self, tiny_space, costs, exact_optimizer):
        """Three-stage recursion equals exhaustive expectimax"""
        _, values = backward_recursion(tiny_space, costs, horizon=3, config=exact_optimizer)
        oracle = brute_force_policy_search(tiny_space, costs, horizon=3)
        np.testing.assert_allclose(values.values, oracle.values, atol=1e-9)

    def test_stochastic_search_dominates(self, tiny_space, costs, exact_optimizer):
        """Allowing stochastic kernels never lowers the optimum"""
        _, exact = backward_recursion(tiny_space, costs, horizon=2, config=exact_optimizer)
        _, searched = backward_recursion(
            tiny_space, costs, horizon=2, config=OptimizerConfig(starts=3, iterations=20)
        )
        assert np.all(searched.values >= exact.values - 1e-12)

    def test_seeded_search_is_reproducible(self, tiny_space, costs):
        """Equal seeds give equal kernels"""
        config = OptimizerConfig(starts=3, iterations=20, seed=5)
        first, _ = backward_recursion(tiny_space, costs, horizon=2, config=config)
        second, _ = backward_recursion(tiny_space, costs, horizon=2, config=config)
        np.testing.assert_array_equal(first.kernels, second.kernels)

    def test_rejects_bad_arguments(self, tiny_space, costs):
        """Horizon and cost size are validated"""
        with pytest.raises(ValueError, match="Horizon"):
            backward_recursion(tiny_space, costs, horizon=0)
        from core.inference import CostMatrix
        with pytest.raises(ValueError, match="Cost matrix size"):
            backward_recursion(tiny_space, CostMatrix.zero_one(3), horizon=1)

    def test_brute_force_size_guard(self, tiny_space, costs):
        """Exhaustive search refuses large instances"""
        with pytest.raises(ValueError, match="too large"):
            brute_force_policy_search(tiny_space, costs, horizon=3, max_size=10)


@pytest.mark.unit
class TestSuccessorDistribution:
    """Joint law of the next reading and output"""

    def test_is_a_distribution(self, tiny_space):
        """Successor probabilities sum to one and land on the lattice"""
        mu = np.full((2, 3), 1.0 / 3.0)
        successors = successor_distribution(1, 2, mu, tiny_space)
        assert sum(s.probability for s in successors) == pytest.approx(1.0)
        for s in successors:
            assert 0 <= s.next_pi_index < 3
            assert 0 <= s.next_z_index < 3

    def test_clipped_outputs_merge(self, tiny_space):
        """At an empty store a discharge request collapses onto idle"""
        mu = np.zeros((2, 3))
        mu[:, 0] = 1.0
        successors = successor_distribution(1, 0, mu, tiny_space)
        assert all(s.y >= s.x for s in successors)
        assert all(s.next_z_index == 0 for s in successors)

    @pytest.mark.parametrize("pi_index,z_index", [(1, 2), (0, 1), (2, 0)])
    def test_matches_joint_enumeration(self, tiny_space, pi_index, z_index):
        """Every (reading, output, belief, energy) mass equals the full joint enumeration"""
        mu = np.array([[0.2, 0.5, 0.3], [0.6, 0.1, 0.3]])
        successors = successor_distribution(pi_index, z_index, mu, tiny_space)
        merged = {(s.x, s.y, s.next_pi_index, s.next_z_index): s.probability for s in successors}
        expected = _enumerated_successors(tiny_space, pi_index, z_index, mu)

        assert set(merged) == set(expected)
        for key, mass in expected.items():
            assert merged[key] == pytest.approx(mass, abs=1e-12), key


@pytest.mark.unit
class TestTieResolution:
    """Choice among value-equal kernels on a household whose readings reveal it"""

    def test_vertex_risk_ignores_the_kernel(self, kettle_space, kettle_model, costs):
        """Once a reading has revealed the kettle, no kernel changes the stage risk"""
        points = kettle_space.belief_grid.points
        off, on = _vertex(kettle_space, 0), _vertex(kettle_space, 1)
        rng = np.random.default_rng(11)
        for _ in range(25):
            mu = rng.dirichlet(np.ones(len(kettle_space.output_grid)), size=len(kettle_space.observation_grid))
            assert min_risk_stage(points[off], mu, kettle_model, costs).value == pytest.approx(
                kettle_model.transition[1, 0], abs=1e-12
            )
            assert min_risk_stage(points[on], mu, kettle_model, costs).value == pytest.approx(
                kettle_model.transition[0, 1], abs=1e-12
            )

    def test_readings_land_on_vertices(self, kettle_space):
        """Every kettle reading moves the belief to a lattice vertex"""
        off, on = _vertex(kettle_space, 0), _vertex(kettle_space, 1)
        for b in range(len(kettle_space.belief_grid)):
            assert kettle_space.next_belief[b, 0] == off
            assert kettle_space.next_belief[b, 1:].tolist() == [on, on, on]

    def test_tied_rows_request_one_output(self, kettle_space, costs, exact_optimizer):
        """Reachable rows ask for 0 W rather than echoing the previous reading"""
        policy, _ = backward_recursion(kettle_space, costs, horizon=2, config=exact_optimizer)
        zero = kettle_space.output_index(0.0)
        mid = kettle_space.project_energy(600.0)
        off, on = _vertex(kettle_space, 0), _vertex(kettle_space, 1)
        for stage in (1, 2):
            assert policy.kernel(stage, off, mid)[0].argmax() == zero
            assert policy.kernel(stage, on, mid)[1:].argmax(axis=1).tolist() == [zero] * 3

    def test_spread_before_loss(self, kettle_space, costs):
        """A constant kernel beats a cheaper one that varies with the conditioning reading"""
        objective = kettle_space.stage_objective(_vertex(kettle_space, 1), costs)
        idle = kettle_space.idle_output
        zero = kettle_space.output_index(0.0)
        kernels = np.array([idle, [zero] * 4, [zero + 1] * 4])
        values = np.zeros((objective.mask.shape[0], 3))
        chosen = resolve_ties(objective, kernels, values, tie_tolerance=1e-12)
        assert chosen.tolist() == [1] * objective.mask.shape[0]

    def test_value_decides_before_ties(self, kettle_space, costs):
        """A strictly better kernel is kept whatever its spread"""
        objective = kettle_space.stage_objective(_vertex(kettle_space, 1), costs)
        idle = kettle_space.idle_output
        zero = kettle_space.output_index(0.0)
        kernels = np.array([[zero] * 4, idle])
        values = np.zeros((objective.mask.shape[0], 2))
        values[:, 1] = 1e-6
        chosen = resolve_ties(objective, kernels, values, tie_tolerance=1e-12)
        assert chosen.tolist() == [1] * objective.mask.shape[0]

    def test_zero_costs_pick_a_constant_kernel(self, tiny_space, exact_optimizer):
        """With nothing to protect every row requests one output whatever the reading"""
        policy, values = backward_recursion(
            tiny_space, CostMatrix(np.zeros((2, 2))), horizon=1, config=exact_optimizer
        )
        assert np.all(values.values == 0.0)
        requested = policy.kernels.argmax(axis=-1)
        assert np.all(requested[..., 0] == requested[..., 1])

    def test_loss_key_ignores_stored_energy(self, kettle_space, costs):
        """The loss preference is one row per output, shared by every energy point"""
        objective = kettle_space.stage_objective(_vertex(kettle_space, 0), costs)
        assert objective.expected_loss.shape == (len(kettle_space.output_grid),)
        assert objective.expected_loss.argmin() == kettle_space.output_index(0.0)

    def test_half_power_run_stays_off_the_meter(self, kettle_space, kettle_model, desk_params, costs, exact_optimizer):
        """A 500 W run is covered by discharging, so the meter never moves"""
        policy, _ = backward_recursion(kettle_space, costs, horizon=4, config=exact_optimizer)
        trace = Trace(slots=np.arange(4), x_watts=np.array([0.0, 500.0, 500.0, 0.0]))
        log = run_controller(policy, trace, kettle_model, desk_params, 600.0, kettle_model.prior)
        assert log.outputs.tolist() == [0.0, 0.0, 0.0, 0.0]
        assert [r.d for r in log.records] == [0.0, -500.0, -500.0, 0.0]
        assert not any(r.clipped for r in log.records)


@pytest.mark.unit
class TestSynthesisError:
    """Error context"""

    def test_names_the_lattice_point(self):
        """The message names stage and indices"""
        error = SynthesisError("Objective is not finite", 4, 2, 7)
        assert (error.stage, error.belief_index, error.energy_index) == (4, 2, 7)
        assert "stage 4" in str(error)
