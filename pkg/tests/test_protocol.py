"""Task schedules, exemplar memory, incremental training, and evaluation."""

import copy

import numpy as np
import pytest

from topodet import model as M
from topodet.config import config_from_dict
from topodet.dataset import AnnotatedInstance
from topodet.openworld import Proposal
from topodet.protocol import (DetectorState, ExemplarStore, InstancePrediction,
                              ProtocolError, TaskSchedule, evaluate_time_point,
                              finetune_stabilize, init_detector,
                              mean_own_anchor_distance, mine_unknown_instances,
                              predict_instances, run_task)
from topodet.topology import UNKNOWN_NAME, generate_random_anchors

from conftest import SMOKE_OVERRIDES


class TestTaskSchedule:
    def test_basic_accessors(self):
        s = TaskSchedule.from_lists([["a", "b"], ["c"]])
        assert s.num_tasks == 2
        assert s.task_names(1) == ("a", "b")
        assert s.task_names(2) == ("c",)
        assert s.all_names() == ("a", "b", "c")

    def test_known_and_unknown_partition(self):
        s = TaskSchedule.from_lists([["a", "b"], ["c"], ["d"]])
        assert s.known_at(0) == ()
        assert s.known_at(2) == ("a", "b", "c")
        assert s.unknown_at(2) == ("d",)
        assert s.unknown_at(3) == ()
        for t in range(4):
            assert set(s.known_at(t)) | set(s.unknown_at(t)) == set(s.all_names())

    def test_index_bounds(self):
        s = TaskSchedule.from_lists([["a"]])
        with pytest.raises(ProtocolError):
            s.task_names(0)
        with pytest.raises(ProtocolError):
            s.task_names(2)
        with pytest.raises(ProtocolError):
            s.known_at(-1)
        with pytest.raises(ProtocolError):
            s.unknown_at(2)

    def test_duplicate_class_rejected(self):
        with pytest.raises(ProtocolError, match="two tasks"):
            TaskSchedule.from_lists([["a"], ["a"]])

    def test_unknown_cannot_be_scheduled(self):
        with pytest.raises(ProtocolError, match="unknown"):
            TaskSchedule.from_lists([[UNKNOWN_NAME]])

    def test_empty_name_rejected(self):
        with pytest.raises(ProtocolError):
            TaskSchedule.from_lists([[""]])

    def test_from_file_round_trip(self, tmp_path):
        p = tmp_path / "s.yaml"
        p.write_text("tasks:\n- [a, b]\n- [c]\n")
        assert TaskSchedule.from_file(p).tasks == (("a", "b"), ("c",))

    def test_from_file_missing(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            TaskSchedule.from_file(tmp_path / "nope.yaml")

    def test_from_file_bad_structure(self, tmp_path):
        p = tmp_path / "s.yaml"
        p.write_text("- [a]\n")
        with pytest.raises(ProtocolError, match="tasks"):
            TaskSchedule.from_file(p)
        p.write_text("tasks: {a: 1}\n")
        with pytest.raises(ProtocolError):
            TaskSchedule.from_file(p)


def inst(image_id: int, name: str, x: float = 1.0) -> AnnotatedInstance:
    return AnnotatedInstance(image_id, name, (x, 0.0), (0.3, 0.3, 0.1, 0.1))


class TestExemplarStore:
    def test_capacity_validated(self):
        with pytest.raises(ProtocolError):
            ExemplarStore(0)

    def test_fills_up_to_capacity(self):
        store = ExemplarStore(3)
        store.update([inst(i, "cat", float(i)) for i in range(10)], seed=0)
        assert store.classes == ("cat",)
        assert len(store.get("cat")) == 3
        assert store.total == 3

    def test_small_pool_taken_whole(self):
        store = ExemplarStore(100)
        store.update([inst(0, "cat"), inst(1, "cat")], seed=0)
        assert len(store.get("cat")) == 2

    def test_selection_is_seed_deterministic(self):
        data = [inst(i, "cat", float(i)) for i in range(30)]
        a = ExemplarStore(5).update(data, seed=42)
        b = ExemplarStore(5).update(data, seed=42)
        assert a.get("cat") == b.get("cat")
        c = ExemplarStore(5).update(data, seed=43)
        assert a.get("cat") != c.get("cat")

    def test_existing_buffers_untouched(self):
        store = ExemplarStore(5)
        store.update([inst(i, "cat", float(i)) for i in range(10)], seed=0)
        first = store.get("cat")
        store.update([inst(i + 100, "cat", float(i)) for i in range(10)], seed=1)
        assert store.get("cat") == first

    def test_unknown_never_stored(self):
        store = ExemplarStore(5)
        store.update([inst(0, UNKNOWN_NAME), inst(1, "cat")], seed=0)
        assert store.classes == ("cat",)

    def test_get_returns_copy(self):
        store = ExemplarStore(5)
        store.update([inst(0, "cat")], seed=0)
        store.get("cat").clear()
        assert len(store.get("cat")) == 1

    def test_classes_processed_in_sorted_order(self):
        # equal seeds must pick equal subsets regardless of arrival order
        cats = [inst(i, "cat", float(i)) for i in range(20)]
        dogs = [inst(i + 50, "dog", float(i)) for i in range(20)]
        a = ExemplarStore(4).update([*cats, *dogs], seed=7)
        b = ExemplarStore(4).update([*dogs, *cats], seed=7)
        assert a.get("cat") == b.get("cat")
        assert a.get("dog") == b.get("dog")


class TestMineUnknowns:
    def test_clear_background_proposal_mined(self):
        train = [inst(0, "cat")]
        props = [Proposal(0, 0.8, (0.9, 0.9), (1.5, 1.5, 0.1, 0.1))]
        mined = mine_unknown_instances(train, props, k=1, overlap_thresh=0.0)
        assert len(mined) == 1
        assert mined[0].class_name == UNKNOWN_NAME
        assert mined[0].input == (0.9, 0.9)
        assert mined[0].box == (1.5, 1.5, 0.1, 0.1)

    def test_overlapping_proposal_skipped(self):
        train = [inst(0, "cat")]
        props = [Proposal(0, 0.8, (0.9, 0.9), (0.3, 0.3, 0.1, 0.1))]
        assert mine_unknown_instances(train, props, 1, 0.0) == []

    def test_top_k_by_objectness_per_image(self):
        train = [inst(0, "cat"), inst(1, "dog")]
        props = [Proposal(0, 0.5, (0.1,) * 2, (1.5, 1.5, 0.1, 0.1)),
                 Proposal(0, 0.9, (0.2,) * 2, (1.7, 1.7, 0.1, 0.1)),
                 Proposal(1, 0.7, (0.3,) * 2, (1.5, 1.5, 0.1, 0.1))]
        mined = mine_unknown_instances(train, props, k=1, overlap_thresh=0.0)
        assert [m.image_id for m in mined] == [0, 1]
        assert mined[0].input == (0.2, 0.2)

    def test_image_without_gt_boxes_still_mined(self):
        props = [Proposal(5, 0.8, (0.1, 0.1), (1.5, 1.5, 0.1, 0.1))]
        mined = mine_unknown_instances([], props, 1, 0.0)
        assert len(mined) == 1


def make_config(**extra):
    raw = {k: dict(v) for k, v in SMOKE_OVERRIDES.items()}
    for section, fields in extra.items():
        raw.setdefault(section, {}).update(fields)
    return config_from_dict(raw)


@pytest.fixture
def fresh_state(smoke_config, two_task_schedule, smoke_bank):
    return init_detector(smoke_config, two_task_schedule, smoke_bank)


class TestInitDetector:
    def test_initial_state(self, fresh_state, smoke_config):
        assert fresh_state.tasks_run == 0
        assert fresh_state.known_slots == set()
        assert fresh_state.topology.names == (UNKNOWN_NAME,)
        assert fresh_state.params.num_slots == smoke_config.model.max_classes + 1

    def test_missing_anchor_rejected(self, smoke_config, two_task_schedule):
        bank = generate_random_anchors(["aeroplane"], dim=12, seed=7)
        with pytest.raises(ProtocolError, match="bicycle"):
            init_detector(smoke_config, two_task_schedule, bank)

    def test_schedule_wider_than_model_rejected(self, two_task_schedule, smoke_bank):
        cfg = make_config(model={"max_classes": 3})
        with pytest.raises(ProtocolError, match="max_classes"):
            init_detector(cfg, two_task_schedule, smoke_bank)

    def test_unknown_anchor_copied_from_bank(self, fresh_state, smoke_bank):
        np.testing.assert_array_equal(fresh_state.topology.vector(UNKNOWN_NAME),
                                      smoke_bank.vector(UNKNOWN_NAME))


def run_pipeline(config, schedule, bank, bench, upto=None):
    state = init_detector(config, schedule, bank)
    for t in range(1, (upto or schedule.num_tasks) + 1):
        classes = set(schedule.task_names(t))
        task_insts = [i for i in bench.train if i.class_name in classes]
        images = {i.image_id for i in task_insts}
        props = [p for p in bench.proposals if p.image_id in images]
        mined = mine_unknown_instances(task_insts, props,
                                       config.rpn.k, config.rpn.overlap_thresh)
        run_task(state, t, [*task_insts, *mined], config)
    return state


class TestRunTask:
    def test_out_of_order_rejected(self, fresh_state, smoke_config, smoke_benchmark):
        with pytest.raises(ProtocolError, match="order"):
            run_task(fresh_state, 2, [], smoke_config)

    def test_foreign_label_rejected(self, fresh_state, smoke_config):
        bad = [inst(0, "bird")]      # a task-2 class offered to task 1
        with pytest.raises(ProtocolError, match="bird"):
            run_task(fresh_state, 1, bad, smoke_config)

    def test_slots_and_topology_after_task(self, smoke_config, two_task_schedule,
                                           smoke_bank, smoke_benchmark):
        state = run_pipeline(smoke_config, two_task_schedule, smoke_bank,
                             smoke_benchmark, upto=1)
        assert state.tasks_run == 1
        assert state.topology.names == (UNKNOWN_NAME, "aeroplane", "bicycle")
        assert state.known_slots == {0, 1, state.params.unknown_slot}
        np.testing.assert_array_equal(state.topology.vector("aeroplane"),
                                      smoke_bank.vector("aeroplane"))
        assert state.slot_of("aeroplane") == 0
        assert state.slot_of(UNKNOWN_NAME) == state.params.unknown_slot
        assert state.name_of_slot(1) == "bicycle"

    def test_second_task_extends_slots(self, smoke_config, two_task_schedule,
                                       smoke_bank, smoke_benchmark):
        state = run_pipeline(smoke_config, two_task_schedule, smoke_bank,
                             smoke_benchmark)
        assert state.tasks_run == 2
        assert state.known_slots == {0, 1, 2, 3, state.params.unknown_slot}
        assert state.exemplars.classes == ("aeroplane", "bicycle", "bird", "boat")
        assert all(len(state.exemplars.get(c)) == 20
                   for c in state.exemplars.classes)

    def test_training_changes_params(self, smoke_config, two_task_schedule,
                                     smoke_bank, smoke_benchmark):
        before = init_detector(smoke_config, two_task_schedule,
                               smoke_bank).params.to_flat()
        state = run_pipeline(smoke_config, two_task_schedule, smoke_bank,
                             smoke_benchmark, upto=1)
        assert not np.array_equal(state.params.to_flat(), before)

    def test_pipeline_is_deterministic(self, smoke_config, two_task_schedule,
                                       smoke_bank, smoke_benchmark):
        a = run_pipeline(smoke_config, two_task_schedule, smoke_bank, smoke_benchmark)
        b = run_pipeline(smoke_config, two_task_schedule, smoke_bank, smoke_benchmark)
        assert np.array_equal(a.params.to_flat(), b.params.to_flat())

    def test_empty_task_advances_counter(self, smoke_config, smoke_bank):
        schedule = TaskSchedule.from_lists([[], ["aeroplane"]])
        state = init_detector(smoke_config, schedule, smoke_bank)
        run_task(state, 1, [], smoke_config)
        assert state.tasks_run == 1
        assert state.known_slots == set()


def enter_task_two(state):
    """Register task-2 anchors the way run_task would before it stabilizes."""
    for name in state.schedule.task_names(2):
        class_id = state.topology.register_anchor(name,
                                                  state.anchor_bank.vector(name))
        state.known_slots.add(class_id - 1)


class TestFinetuneStabilize:
    def test_missing_exemplars_warns_and_proceeds(self, smoke_config,
                                                  two_task_schedule, smoke_bank,
                                                  smoke_benchmark, caplog):
        state = run_pipeline(smoke_config, two_task_schedule, smoke_bank,
                             smoke_benchmark, upto=1)
        enter_task_two(state)
        new = [i for i in smoke_benchmark.train if i.class_name == "bird"][:5]
        empty = ExemplarStore(5)
        with caplog.at_level("WARNING"):
            finetune_stabilize(state, empty, new, smoke_config)
        assert "no exemplars" in caplog.text
        assert "aeroplane" in caplog.text

    def test_plain_finetune_matches_zero_anchor_weight(
            self, two_task_schedule, smoke_bank, smoke_benchmark):
        base = run_pipeline(make_config(), two_task_schedule, smoke_bank,
                            smoke_benchmark, upto=1)
        enter_task_two(base)
        new = [i for i in smoke_benchmark.train if i.class_name == "bird"][:8]

        plain = copy.deepcopy(base)
        finetune_stabilize(plain, plain.exemplars, new,
                           make_config(ablation={"plain_finetune": True}))
        zero_sa = copy.deepcopy(base)
        finetune_stabilize(zero_sa, zero_sa.exemplars, new,
                           make_config(loss={"w_sa": 0.0}))
        full = copy.deepcopy(base)
        finetune_stabilize(full, full.exemplars, new, make_config())

        assert np.array_equal(plain.params.to_flat(), zero_sa.params.to_flat())
        assert not np.array_equal(plain.params.to_flat(), full.params.to_flat())

    def test_no_pools_is_a_no_op(self, fresh_state, smoke_config):
        before = fresh_state.params.to_flat()
        finetune_stabilize(fresh_state, ExemplarStore(5), [], smoke_config)
        assert np.array_equal(fresh_state.params.to_flat(), before)


class TestPredictAndEvaluate:
    def test_mode_validated(self, fresh_state):
        with pytest.raises(ProtocolError, match="mode"):
            predict_instances(fresh_state, [], mode="argmax")

    def test_eval_instance_needs_box(self, smoke_config, two_task_schedule,
                                     smoke_bank, smoke_benchmark):
        state = run_pipeline(smoke_config, two_task_schedule, smoke_bank,
                             smoke_benchmark, upto=1)
        boxless = AnnotatedInstance(0, "aeroplane", (1.0,) * 8, None)
        with pytest.raises(ProtocolError, match="box"):
            predict_instances(state, [boxless])

    def test_prediction_fields(self, smoke_config, two_task_schedule,
                               smoke_bank, smoke_benchmark):
        state = run_pipeline(smoke_config, two_task_schedule, smoke_bank,
                             smoke_benchmark, upto=1)
        preds = predict_instances(state, smoke_benchmark.eval[:10])
        valid = {UNKNOWN_NAME, "aeroplane", "bicycle"}
        for p, ev in zip(preds, smoke_benchmark.eval[:10]):
            assert p.pred_name in valid
            assert 0.0 <= p.score <= 1.0
            assert p.box == ev.box
            assert p.f_hat.shape == (12,)

    def test_single_head_modes_agree_with_posterior(
            self, smoke_config, two_task_schedule, smoke_bank, smoke_benchmark):
        state = run_pipeline(smoke_config, two_task_schedule, smoke_bank,
                             smoke_benchmark, upto=1)
        ev = smoke_benchmark.eval[:5]
        roi = predict_instances(state, ev, mode="roi")
        sem = predict_instances(state, ev, mode="sem")
        ens = predict_instances(state, ev, mode="ensemble")
        assert len(roi) == len(sem) == len(ens) == 5

    def test_relabel(self):
        from topodet.protocol import relabel_for_time_point
        assert relabel_for_time_point("cat", ("cat",)) == "cat"
        assert relabel_for_time_point("dog", ("cat",)) == UNKNOWN_NAME


def pred(image_id, true_name, pred_name, score, box):
    return InstancePrediction(image_id=image_id, true_name=true_name,
                              pred_name=pred_name, score=score, box=box,
                              f_hat=np.zeros(2))


class TestEvaluateTimePoint:
    """Metric plumbing checked on hand-built predictions, no training involved."""

    SCHEDULE = TaskSchedule.from_lists([["a"], ["b"]])

    def make_state(self):
        cfg = make_config(model={"max_classes": 2})
        bank = generate_random_anchors(["a", "b"], dim=12, seed=1)
        return cfg, init_detector(cfg, self.SCHEDULE, bank)

    def test_constructed_open_set_errors(self):
        cfg, state = self.make_state()
        box = (10.0, 10.0, 4.0, 4.0)
        eval_data = [AnnotatedInstance(1, "a", (0.0,) * 8, box),
                     AnnotatedInstance(2, "b", (0.0,) * 8, box),
                     AnnotatedInstance(3, "b", (0.0,) * 8, box)]
        preds = [pred(1, "a", "a", 0.9, box),       # true positive
                 pred(2, "b", "a", 0.8, box),       # unknown absorbed into 'a'
                 pred(3, "b", "a", 0.7, box)]       # and again
        rec = evaluate_time_point(state, eval_data, self.SCHEDULE, 1, cfg,
                                  predictions=preds)
        assert rec.a_ose == 2
        assert rec.map_prev is None
        assert rec.map_curr == pytest.approx(1.0)
        assert rec.map_both == pytest.approx(1.0)
        # recall 1/1 is reached by the first detection, before any open FP
        assert rec.wi == pytest.approx(0.0)

    def test_future_class_counts_as_known_later(self):
        cfg, state = self.make_state()
        box = (10.0, 10.0, 4.0, 4.0)
        eval_data = [AnnotatedInstance(1, "a", (0.0,) * 8, box),
                     AnnotatedInstance(2, "b", (0.0,) * 8, box)]
        preds = [pred(1, "a", "a", 0.9, box),
                 pred(2, "b", "b", 0.8, box)]
        rec = evaluate_time_point(state, eval_data, self.SCHEDULE, 2, cfg,
                                  predictions=preds)
        assert rec.a_ose == 0
        assert rec.map_prev == pytest.approx(1.0)
        assert rec.map_curr == pytest.approx(1.0)
        assert rec.map_both == pytest.approx(1.0)
        assert rec.wi == pytest.approx(0.0)

    def test_perfect_unknown_handling_scores_clean(self):
        cfg, state = self.make_state()
        box = (10.0, 10.0, 4.0, 4.0)
        eval_data = [AnnotatedInstance(1, "a", (0.0,) * 8, box),
                     AnnotatedInstance(2, "b", (0.0,) * 8, box)]
        preds = [pred(1, "a", "a", 0.9, box),
                 pred(2, "b", UNKNOWN_NAME, 0.8, box)]
        rec = evaluate_time_point(state, eval_data, self.SCHEDULE, 1, cfg,
                                  predictions=preds)
        assert rec.a_ose == 0
        assert rec.wi == pytest.approx(0.0)
        assert rec.map_curr == pytest.approx(1.0)


class TestMeanOwnAnchorDistance:
    def test_matches_manual_forward(self, smoke_config, two_task_schedule,
                                    smoke_bank, smoke_benchmark):
        state = run_pipeline(smoke_config, two_task_schedule, smoke_bank,
                             smoke_benchmark, upto=1)
        sample = [i for i in smoke_benchmark.eval
                  if i.class_name == "aeroplane"][:4]
        got = mean_own_anchor_distance(state, sample, ["aeroplane"])
        mask = M.slot_mask(sorted(state.known_slots), state.params.num_slots)
        anchor = state.anchor_vector("aeroplane")
        manual = np.mean([np.linalg.norm(
            M.forward(state.params, i.input_array, mask).f_hat - anchor)
            for i in sample])
        assert got == pytest.approx(manual, abs=1e-12)

    def test_no_matching_instances_raises(self, fresh_state):
        with pytest.raises(ProtocolError, match="no instances"):
            mean_own_anchor_distance(fresh_state, [], ["aeroplane"])
