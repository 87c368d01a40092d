import random

import pytest

from searchrl.rewards import (
    DEFAULT_CONSTANTS,
    RewardConstants,
    classify_steps,
    cumulative_reward_curve,
    efficiency_reward,
    find_capability_depth,
    format_reward,
    outcome_reward,
    quality_reward,
    score_trajectory,
)
from searchrl.trajectory import QuestionRecord, Step, Termination, Trajectory


def make_traj(intermediates, final="gold", valid=None, qid="q1"):
    valid = valid if valid is not None else [True] * len(intermediates)
    steps = tuple(
        Step(
            index=i,
            think="",
            search_query=f"query {i}",
            retrieved_doc_ids=(f"d{i}",),
            observation="obs",
            intermediate_answer=inter,
            valid=v,
        )
        for i, (inter, v) in enumerate(zip(intermediates, valid), start=1)
    )
    return Trajectory(
        question_id=qid,
        steps=steps,
        final_answer=final,
        termination=Termination.ANSWERED if final is not None else Termination.MAX_TURNS_REACHED,
    )


RECORD = QuestionRecord(id="q1", question="?", gold_answers=("gold",))


class TestFormatReward:
    def test_four_case_table(self):
        assert format_reward(True, False) == 0.0
        assert format_reward(False, False) == -0.05
        assert format_reward(True, True) == 0.1
        assert format_reward(False, True) == -0.5

    def test_exhaustive_outputs(self):
        outputs = {format_reward(v, t) for v in (True, False) for t in (True, False)}
        assert outputs == {0.0, -0.05, 0.1, -0.5}


class TestOutcomeReward:
    def test_correct_terminal(self):
        assert outcome_reward("gold", ("gold",), True) == 1.0

    def test_non_terminal_zero(self):
        assert outcome_reward("gold", ("gold",), False) == 0.0

    def test_absent_answer_zero(self):
        assert outcome_reward(None, ("gold",), True) == 0.0


class TestCapabilityDepth:
    def test_earliest_match(self):
        assert find_capability_depth(["wrong", "gold", "gold"], ("gold",)) == 2

    def test_all_wrong(self):
        assert find_capability_depth(["a", "b"], ("gold",)) == -1

    def test_empty(self):
        assert find_capability_depth([], ("gold",)) == -1

    def test_none_entries_skipped(self):
        assert find_capability_depth([None, "gold"], ("gold",)) == 2


class TestEfficiencyReward:
    def test_undersearch_branch(self):
        assert efficiency_reward(1, -1, 4) == 0.025
        assert efficiency_reward(4, -1, 4) == 0.025

    def test_effective_branch_values(self):
        # Per-step effective reward strictly decreases with capability depth.
        expected = {1: 0.35, 2: 0.15, 3: 1 / 12, 4: 0.05}
        for t_c, value in expected.items():
            assert efficiency_reward(1, t_c, 4) == pytest.approx(value, abs=1e-6)
        values = [efficiency_reward(1, t_c, 4) for t_c in (1, 2, 3, 4)]
        assert values == sorted(values, reverse=True)

    def test_oversearch_branch(self):
        assert efficiency_reward(3, 2, 4) == -0.1

    def test_boundary_between_branches(self):
        assert efficiency_reward(2, 4, 4) == pytest.approx(0.05, abs=1e-6)

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            efficiency_reward(0, 1, 3)
        with pytest.raises(ValueError):
            efficiency_reward(4, 1, 3)
        with pytest.raises(ValueError):
            efficiency_reward(1, 5, 3)


class TestQualityReward:
    def test_hand_sequence(self):
        f1s = [0.0, 0.5, 0.4, 1.0]
        assert [quality_reward(f1s, t) for t in range(1, 5)] == pytest.approx(
            [0.0, 0.5, -0.1, 0.5]
        )

    def test_single_step_empty_prefix(self):
        assert quality_reward([1.0], 1) == 1.0

    def test_constant_sequence(self):
        assert [quality_reward([0.0, 0.0], t) for t in (1, 2)] == [0.0, 0.0]

    def test_clip_toggle(self):
        clipped = RewardConstants(clip_quality=True)
        assert quality_reward([0.5, 0.2], 2, clipped) == 0.0
        assert quality_reward([0.5, 0.2], 2) == pytest.approx(-0.3)

    def test_telescoping_bound(self):
        rng = random.Random(0)
        for _ in range(200):
            f1s = [rng.random() for _ in range(rng.randint(1, 8))]
            total = sum(quality_reward(f1s, t) for t in range(1, len(f1s) + 1))
            assert total <= max(f1s) + 1e-12
        nondecreasing = [0.1, 0.3, 0.3, 0.9]
        total = sum(quality_reward(nondecreasing, t) for t in range(1, 5))
        assert total == pytest.approx(max(nondecreasing))


class TestScoreTrajectory:
    def test_one_step_correct(self):
        traj = make_traj(["gold"], final="gold")
        breakdown, scored = score_trajectory(traj, RECORD)
        assert scored.t_c == 1
        assert breakdown.overall[-1] == pytest.approx(1.1)
        # step 1: format 0 + efficiency ~0.35 + quality gain 1.0
        assert breakdown.overall[0] == pytest.approx(0.35 + 1.0, abs=1e-5)

    def test_all_invalid_wrong_answer(self):
        traj = make_traj(["a", "b"], final="wrong", valid=[False, False])
        breakdown, _ = score_trajectory(traj, RECORD)
        assert breakdown.format == pytest.approx((-0.05, -0.05, 0.1))

    def test_forced_termination_terminal_format(self):
        traj = make_traj(["a", "b"], final=None)
        breakdown, _ = score_trajectory(traj, RECORD)
        assert breakdown.format[-1] == -0.5
        assert breakdown.outcome[-1] == 0.0

    def test_zero_step_direct_answer(self):
        traj = make_traj([], final="gold")
        breakdown, scored = score_trajectory(traj, RECORD)
        assert breakdown.overall == (1.1,)
        assert scored.t_c == -1

    def test_missing_intermediate_rejected(self):
        steps = (
            Step(
                index=1,
                think="",
                search_query="q",
                retrieved_doc_ids=("d",),
                observation="o",
                intermediate_answer=None,
                valid=True,
            ),
        )
        traj = Trajectory(
            question_id="q1", steps=steps, final_answer="x", termination=Termination.ANSWERED
        )
        with pytest.raises(ValueError, match="step 1"):
            score_trajectory(traj, RECORD)

    def test_decomposition_exact(self):
        rng = random.Random(7)
        for _ in range(100):
            n = rng.randint(0, 5)
            intermediates = [rng.choice(["gold", "meh", "partial gold"]) for _ in range(n)]
            final = rng.choice(["gold", "wrong", None])
            valid = [rng.random() < 0.8 for _ in range(n)]
            traj = make_traj(intermediates, final=final, valid=valid)
            breakdown, _ = score_trajectory(traj, RECORD)
            for i in range(n + 1):
                total = (
                    breakdown.format[i]
                    + breakdown.outcome[i]
                    + breakdown.efficiency[i]
                    + breakdown.quality[i]
                )
                assert breakdown.overall[i] == total

    def test_ablation_zeroes_components(self):
        traj = make_traj(["gold"], final="gold")
        breakdown, _ = score_trajectory(traj, RECORD, ablate={"efficiency"})
        assert breakdown.efficiency == (0.0, 0.0)
        assert breakdown.quality[0] == 1.0
        base_off, _ = score_trajectory(traj, RECORD, ablate={"base"})
        assert base_off.format == (0.0, 0.0)
        assert base_off.outcome == (0.0, 0.0)

    def test_unknown_ablation_rejected(self):
        with pytest.raises(ValueError):
            score_trajectory(make_traj(["gold"]), RECORD, ablate={"sparkle"})

    def test_scored_copy_round_trips_rewards(self):
        traj = make_traj(["wrong", "gold"], final="gold")
        breakdown, scored = score_trajectory(traj, RECORD)
        assert scored.t_c == 2
        for i, step in enumerate(scored.steps):
            assert step.rewards is not None
            assert step.rewards.overall == pytest.approx(breakdown.overall[i])


class TestCumulativeCurve:
    def test_hand_values(self):
        curve = dict(cumulative_reward_curve(2, 8))
        assert curve[2] == pytest.approx(1.4, abs=1e-5)
        assert curve[3] == pytest.approx(1.3, abs=1e-5)

    def test_single_cell(self):
        curve = cumulative_reward_curve(1, 1)
        assert curve[0][1] == pytest.approx(1.45, abs=1e-5)

    def test_peak_at_capability_depth(self):
        for t_c in range(1, 9):
            curve = cumulative_reward_curve(t_c, 8)
            best_depth = max(curve, key=lambda dv: dv[1])[0]
            assert best_depth == t_c
            values = [v for _, v in curve]
            for d in range(t_c, 8):
                assert values[d] - values[d - 1] == pytest.approx(-0.1, abs=1e-9)

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            cumulative_reward_curve(9, 8)
        with pytest.raises(ValueError):
            cumulative_reward_curve(0, 8)


def test_classify_steps():
    assert classify_steps(-1, 3) == {"under_search": 3, "effective_search": 0, "over_search": 0}
    assert classify_steps(2, 4) == {"under_search": 0, "effective_search": 2, "over_search": 2}
    with pytest.raises(ValueError):
        classify_steps(None, 2)


def test_constants_validation():
    with pytest.raises(ValueError):
        RewardConstants(epsilon=0.0)
    with pytest.raises(ValueError):
        RewardConstants(undersearch=float("nan"))
    assert DEFAULT_CONSTANTS.epsilon == 1e-6
