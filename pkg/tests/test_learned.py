import numpy as np
import pytest

from conftest import small_lasso
from proxl2o import classic, learned
from proxl2o.classic import SolverConfig
from proxl2o.densecore import named_stream
from proxl2o.problems import BatchedProblems
from proxl2o.tape import EAGER, Tape


def zero_params(preset="PA", seed=0, **kw):
    params = learned.init_params(learned.ablation_preset(preset), seed=seed, **kw)
    for k in params.weights:
        params.weights[k][:] = 0.0
    return params


def forward_once(params, bp, state):
    gx = learned.grad_ops(EAGER, bp, state.x)
    raw, hidden = learned.lstm_mlp_forward(params, state.x, gx, state.hidden)
    return learned.resolve_coeffs(params, bp, raw), hidden, gx


class TestAblationPresets:
    def test_preset_table_matches_ablation_list(self):
        fixed = {
            "PBA12": {},
            "PBA1": {"b2": 0.0},
            "PBA2": {"b1": 0.0},
            "PBA": {"b1": 0.0, "b2": 0.0},
            "PA": {"b": 1.0, "b1": 0.0, "b2": 0.0},
            "P": {"a": 0.0, "b": 1.0, "b1": 0.0, "b2": 0.0},
            "A": {"p": "1/L", "b": 1.0, "b1": 0.0, "b2": 0.0},
        }
        for name, expect in fixed.items():
            ab = learned.ablation_preset(name)
            for c in learned.CHANNELS_STRUCTURED:
                mode = ab.modes[c]
                if c in expect:
                    assert not mode.learnable and mode.fixed == expect[c]
                else:
                    assert mode.learnable

    def test_unknown_preset(self):
        with pytest.raises(ValueError):
            learned.ablation_preset("XYZ")


class TestForward:
    def test_zero_weights_channel_values(self):
        params = zero_params("PBA12")
        bp = BatchedProblems([small_lasso(seed=80, m=8, n=12, s=3)])
        state = learned.initial_state(params, bp)
        coeffs, _, _ = forward_once(params, bp, state)
        assert np.allclose(np.asarray(coeffs.p), np.log(2.0), atol=1e-15)
        assert np.allclose(np.asarray(coeffs.a), 0.5, atol=1e-15)
        assert np.allclose(np.asarray(coeffs.b), 0.5, atol=1e-15)
        assert np.array_equal(np.asarray(coeffs.b1), np.zeros((1, 12)))
        assert np.array_equal(np.asarray(coeffs.b2), np.zeros((1, 12)))

    def test_output_shapes_match_dim(self):
        params = learned.init_params(learned.ablation_preset("PA"), seed=3)
        bp = BatchedProblems([small_lasso(seed=81, m=20, n=500, s=10)])
        state = learned.initial_state(params, bp)
        coeffs, _, _ = forward_once(params, bp, state)
        assert np.asarray(coeffs.p).shape == (1, 500)
        assert np.asarray(coeffs.a).shape == (1, 500)

    def test_coordinate_weight_sharing(self):
        # identical (x_i, g_i) pairs with identical hidden state give
        # identical coefficients regardless of the coordinate index
        params = learned.init_params(learned.ablation_preset("PA"), seed=4)
        bp = BatchedProblems([small_lasso(seed=82, m=6, n=4, s=2)])
        x = np.array([[0.3, 0.3, -0.2, 0.3]])
        g = np.array([[0.1, 0.1, 0.5, 0.1]])
        hidden = learned.initial_hidden(params, 4)
        raw, _ = learned.lstm_mlp_forward(params, x, g, hidden)
        p = np.asarray(raw["p"])[0]
        assert p[0] == p[1] == p[3]
        assert p[2] != p[0]

    def test_channel_ranges(self, rng):
        params = learned.init_params(learned.ablation_preset("PBA12"), seed=5)
        bp = BatchedProblems([small_lasso(seed=83, m=10, n=16, s=4)])
        state = learned.RolloutState(x=rng.normal(16).reshape(1, 16),
                                     y=rng.normal(16).reshape(1, 16),
                                     hidden=learned.initial_hidden(params, 16))
        coeffs, _, _ = forward_once(params, bp, state)
        assert np.min(np.asarray(coeffs.p)) > 0.0
        assert 0.0 < np.min(np.asarray(coeffs.a)) and np.max(np.asarray(coeffs.a)) < 1.0
        assert 0.0 < np.min(np.asarray(coeffs.b)) and np.max(np.asarray(coeffs.b)) < 1.0

    def test_param_count_formula(self):
        params = learned.init_params(learned.ablation_preset("PA"), seed=6)
        h, i = 20, 2
        expect = (i * 4 * h + h * 4 * h + 4 * h) + (h * 4 * h + h * 4 * h + 4 * h)
        expect += h * 2 + 2  # head for (p, a)
        expect += 2 * h * 2  # h0, c0
        assert params.param_count() == expect
        total = sum(v.size for v in params.weights.values())
        assert total == expect


class TestStructuredStep:
    def test_fista_equivalence_small(self):
        problem = small_lasso(seed=84, m=40, n=80, s=10)
        bp = BatchedProblems([problem])
        steps = 120
        schedule = learned.fista_momentum_schedule(steps)
        ys = []
        classic.fista_run(problem, SolverConfig(kind="fista", max_iter=steps),
                          np.zeros(80), iterate_log=ys)
        state = learned.RolloutState(x=np.zeros((1, 80)), y=np.zeros((1, 80)), hidden=[])
        worst = 0.0
        for k in range(steps):
            state = learned.structured_step(bp, state, learned.fista_coeffs(bp, k, schedule))
            worst = max(worst, float(np.max(np.abs(state.x[0] - ys[k]))))
        assert worst <= 1e-12

    def test_pgd_reduction_exact(self):
        problem = small_lasso(seed=85, m=30, n=50, s=8)
        bp = BatchedProblems([problem])
        L = problem.lipschitz()
        metrics = [np.full(50, (0.3 + 0.01 * k) / L) for k in range(40)]
        xs = []
        classic.pgd_metric_run(problem, lambda k: metrics[k], np.zeros(50),
                               max_iter=40, iterate_log=xs)
        zeros = np.zeros((1, 50))
        state = learned.RolloutState(x=zeros.copy(), y=zeros.copy(), hidden=[])
        for k in range(40):
            coeffs = learned.StructuredCoeffs(p=metrics[k][None, :], a=zeros, b=zeros,
                                              b1=zeros, b2=zeros)
            state = learned.structured_step(bp, state, coeffs)
            assert np.max(np.abs(state.x[0] - xs[k])) == 0.0

    def test_pa_step_equals_structured_b1(self, rng):
        problem = small_lasso(seed=86, m=12, n=20, s=4)
        bp = BatchedProblems([problem])
        shape = (1, 20)
        p = 0.05 + 0.2 * rng.uniform(20).reshape(shape)
        a = rng.uniform(20).reshape(shape)
        state0 = learned.RolloutState(x=rng.normal(20).reshape(shape),
                                      y=rng.normal(20).reshape(shape), hidden=[])
        via_pa = learned.l2o_pa_step(bp, state0, p, a)
        coeffs = learned.StructuredCoeffs(p=p, a=a, b=np.ones(shape),
                                          b1=np.zeros(shape), b2=np.zeros(shape))
        via_structured = learned.structured_step(bp, state0, coeffs)
        assert np.max(np.abs(np.asarray(via_pa.x) - np.asarray(via_structured.x))) == 0.0
        assert np.max(np.abs(np.asarray(via_pa.y) - np.asarray(via_structured.y))) == 0.0

    def test_pa_step_ista_reduction(self):
        problem = small_lasso(seed=87, m=15, n=25, s=5)
        bp = BatchedProblems([problem])
        L = problem.lipschitz()
        shape = (1, 25)
        state = learned.RolloutState(x=np.zeros(shape), y=np.zeros(shape), hidden=[])
        stepped = learned.l2o_pa_step(bp, state, np.full(shape, 1.0 / L),
                                      np.zeros(shape))
        ista = classic.ista_run(problem, SolverConfig(max_iter=1), np.zeros(25))
        assert np.max(np.abs(np.asarray(stepped.x)[0] - ista.solution)) == 0.0

    def test_fista_schedule_pa_matches_fista_run(self):
        problem = small_lasso(seed=88, m=30, n=60, s=10)
        bp = BatchedProblems([problem])
        steps = 100
        schedule = learned.fista_momentum_schedule(steps)
        ys = []
        classic.fista_run(problem, SolverConfig(kind="fista", max_iter=steps),
                          np.zeros(60), iterate_log=ys)
        L = problem.lipschitz()
        shape = (1, 60)
        state = learned.RolloutState(x=np.zeros(shape), y=np.zeros(shape), hidden=[])
        worst = 0.0
        for k in range(steps):
            state = learned.l2o_pa_step(bp, state, np.full(shape, 1.0 / L),
                                        np.full(shape, schedule[k]))
            worst = max(worst, float(np.max(np.abs(np.asarray(state.x)[0] - ys[k]))))
        assert worst <= 1e-12

    def test_nonpositive_p_rejected(self):
        problem = small_lasso(seed=89, m=6, n=8, s=2)
        bp = BatchedProblems([problem])
        shape = (1, 8)
        state = learned.RolloutState(x=np.zeros(shape), y=np.zeros(shape), hidden=[])
        with pytest.raises(ValueError):
            learned.l2o_pa_step(bp, state, np.zeros(shape), np.zeros(shape))

    def test_fixed_point_preserved_at_solution(self):
        # with b1 = b2 = 0, any positive p keeps the oracle solution fixed
        problem = small_lasso(seed=90, m=25, n=40, s=8)
        problem.ensure_fstar(tol=1e-12)
        bp = BatchedProblems([problem])
        xs = problem.x_star_oracle.reshape(1, -1)
        params = learned.init_params(learned.ablation_preset("PA"), seed=13)
        state = learned.RolloutState(x=xs.copy(), y=xs.copy(),
                                     hidden=learned.initial_hidden(params, 40))
        coeffs, _, gx = forward_once(params, bp, state)
        new = learned.structured_step(bp, state, coeffs, grad_x=gx)
        assert np.linalg.norm(np.asarray(new.x) - xs) <= 1e-9


class TestGenericBaseline:
    def test_zero_weights_no_motion(self):
        params = zero_params("GENERIC")
        problem = small_lasso(seed=91, m=10, n=15, s=3)
        rec, _ = learned.rollout(problem, params, 5)
        assert rec.objectives[0] == rec.objectives[-1]

    def test_copy_gradient_head_is_gradient_step(self):
        # force the LSTM contribution to zero and wire d = subgradient column
        params = zero_params("GENERIC")
        problem = small_lasso(seed=92, m=10, n=15, s=3)
        bp = BatchedProblems([problem])
        state = learned.initial_state(params, bp)
        g_in = learned.subgrad_ops(EAGER, bp, state.x)
        raw, _ = learned.lstm_mlp_forward(params, state.x, g_in, state.hidden)
        assert np.array_equal(np.asarray(raw["d"]), np.zeros((1, 15)))
        d = 0.01 * np.asarray(g_in)
        stepped = learned.generic_step(bp, state, d)
        assert np.allclose(np.asarray(stepped.x), -d + np.asarray(state.x), atol=0)


class TestRollout:
    def test_k1_fista_coeffs_is_one_ista_step(self):
        problem = small_lasso(seed=93, m=12, n=18, s=4)
        bp = BatchedProblems([problem])
        shape = (1, 18)
        L = problem.lipschitz()
        state = learned.RolloutState(x=np.zeros(shape), y=np.zeros(shape), hidden=[])
        schedule = learned.fista_momentum_schedule(1)
        state = learned.structured_step(bp, state, learned.fista_coeffs(bp, 0, schedule))
        ista = classic.ista_run(problem, SolverConfig(max_iter=1), np.zeros(18))
        assert problem.objective(np.asarray(state.y)[0]) == ista.objectives[-1]

    def test_rollout_records_k_plus_one_points(self):
        problem = small_lasso(seed=94, m=10, n=12, s=3)
        params = learned.init_params(learned.ablation_preset("PA"), seed=14)
        rec, loss = learned.rollout(problem, params, 7)
        assert rec.iters == list(range(8))
        assert float(loss) == pytest.approx(np.mean(rec.objectives[1:]), rel=1e-12)

    def test_rollout_loss_on_tape_matches_eager(self):
        problem = small_lasso(seed=95, m=10, n=12, s=3)
        params = learned.init_params(learned.ablation_preset("PA"), seed=15)
        _, eager_loss = learned.rollout(problem, params, 4)
        tape = Tape()
        _, var_loss = learned.rollout(problem, params, 4, tape=tape)
        assert float(eager_loss) == float(var_loss.value)

    def test_hidden_state_evolves(self):
        problem = small_lasso(seed=96, m=10, n=12, s=3)
        params = learned.init_params(learned.ablation_preset("PA"), seed=16)
        bp = BatchedProblems([problem])
        out = learned.rollout_batch(bp, params, 3, want_objectives=True)
        h_final = out["state"].hidden[0][0]
        h_init = learned.initial_hidden(params, 12)[0][0]
        assert not np.allclose(h_final, h_init)
