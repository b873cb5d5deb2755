"""Command-line interface: dataset generation, runs, evaluation, anchor export.

Commands:
  gen-data         write the synthetic benchmark files for a config
  run              execute the full incremental protocol and export results
  eval             score externally produced detection files
  export-topology  build a topology (file or random) and save it

Exit codes: 0 success; 2 usage errors (argument parsing); 3 config, schedule,
or validation errors; 4 unreadable or malformed data files; 5 runtime
failures inside training or inference.

Input paths inside a config file resolve relative to the config file's
directory; output_dir and paths given directly on the command line resolve
relative to the working directory.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from .config import ConfigError, ExperimentConfig, load_config
from .dataset import (DatasetError, load_detections, load_ground_truth,
                      load_instances, load_proposals, make_toy_benchmark,
                      save_instances, save_proposals)
from .metrics import GroundTruth, MetricsError, compute_aose, compute_map, compute_wi
from .model import ModelError, save_checkpoint
from .openworld import OpenWorldError
from .protocol import (ProtocolError, TaskSchedule, evaluate_time_point,
                       init_detector, mine_unknown_instances,
                       predict_instances, relabel_for_time_point, run_task)
from .report import (render_feature_figure, render_metrics_figure,
                     write_feature_dump, write_metrics_csv)
from .topology import (UNKNOWN_NAME, AnchorFileError, SemanticTopology,
                       TopologyError, generate_random_anchors, load_anchors)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 3
EXIT_DATA = 4
EXIT_RUNTIME = 5


def _load_schedule(cfg: ExperimentConfig) -> TaskSchedule:
    if not cfg.data.schedule:
        raise ConfigError("data.schedule must point to a schedule file")
    return TaskSchedule.from_file(cfg.resolve_path(cfg.data.schedule))


def _build_anchor_bank(cfg: ExperimentConfig, schedule: TaskSchedule) -> SemanticTopology:
    if cfg.anchors.source == "random":
        return generate_random_anchors(list(schedule.all_names()),
                                       cfg.anchors.dim, cfg.seed)
    return load_anchors(cfg.resolve_path(cfg.anchors.file),
                        normalize=cfg.anchors.normalize)


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    schedule = _load_schedule(cfg)
    if len(schedule.all_names()) > cfg.model.input_dim:
        raise ConfigError(
            f"schedule has {len(schedule.all_names())} classes; the synthetic "
            f"benchmark needs model.input_dim at least that large")
    bench = make_toy_benchmark(schedule.tasks, input_dim=cfg.model.input_dim,
                               sigma=cfg.data.sigma, radius=cfg.data.radius,
                               train_per_class=cfg.data.train_per_class,
                               eval_per_class=cfg.data.eval_per_class,
                               seed=cfg.seed)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    save_instances(outdir / "train.jsonl", bench.train)
    save_instances(outdir / "eval.jsonl", bench.eval)
    save_proposals(outdir / "proposals.jsonl", bench.proposals)
    print(f"wrote {len(bench.train)} train, {len(bench.eval)} eval instances "
          f"and {len(bench.proposals)} proposals to {outdir}")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    if args.output:
        cfg.output_dir = args.output
    schedule = _load_schedule(cfg)
    bank = _build_anchor_bank(cfg, schedule)
    state = init_detector(cfg, schedule, bank)

    if not cfg.data.train or not cfg.data.eval:
        raise ConfigError("data.train and data.eval paths are required for run")
    train = load_instances(cfg.resolve_path(cfg.data.train))
    eval_data = load_instances(cfg.resolve_path(cfg.data.eval))
    proposals = (load_proposals(cfg.resolve_path(cfg.data.proposals))
                 if cfg.data.proposals else [])

    scheduled = set(schedule.all_names())
    for inst in train:
        if inst.class_name not in scheduled:
            raise ProtocolError(
                f"training instance labeled {inst.class_name!r} is not in the schedule")

    outdir = Path(cfg.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)

    records = []
    for t in range(1, schedule.num_tasks + 1):
        task_classes = set(schedule.task_names(t))
        task_insts = [i for i in train if i.class_name in task_classes]
        task_images = {i.image_id for i in task_insts}
        task_props = [p for p in proposals if p.image_id in task_images]
        mined = mine_unknown_instances(task_insts, task_props,
                                       cfg.rpn.k, cfg.rpn.overlap_thresh)
        run_task(state, t, [*task_insts, *mined], cfg)

        preds = predict_instances(state, eval_data, cfg.inference_mode())
        rec = evaluate_time_point(state, eval_data, schedule, t, cfg,
                                  predictions=preds)
        records.append(rec)
        logger.info("task %d: WI=%s A-OSE=%s mAP_both=%s",
                    t, rec.wi, rec.a_ose, rec.map_both)

        save_checkpoint(outdir / f"checkpoint_task{t:02d}.bin", state.params,
                        extra={"task": t, "classes": list(state.topology.names)})
        known = schedule.known_at(t)
        rows = []
        for p in preds:
            label = relabel_for_time_point(p.true_name, known)
            distance = float(np.linalg.norm(p.f_hat - state.topology.vector(label)))
            rows.append((label, p.f_hat, distance))
        write_feature_dump(outdir / f"features_task{t:02d}.jsonl", rows)
        anchors = {n: state.topology.vector(n) for n in state.topology.names}
        render_feature_figure(outdir / f"features_task{t:02d}.png", rows, anchors,
                              title=f"semantic features after task {t}")

    write_metrics_csv(outdir / "metrics.csv", records)
    render_metrics_figure(outdir / "metrics.png", records)
    (outdir / "config_resolved.yaml").write_text(
        yaml.safe_dump(cfg.to_dict(), sort_keys=True), encoding="utf-8")
    print(f"run complete: {outdir / 'metrics.csv'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if (args.schedule is None) != (args.task is None):
        raise ConfigError("--schedule and --task must be given together")
    gts = load_ground_truth(args.gt)
    dets = load_detections(args.det)
    if args.schedule:
        schedule = TaskSchedule.from_file(args.schedule)
        known = list(schedule.known_at(args.task))
        gts = [GroundTruth(g.image_id,
                           relabel_for_time_point(g.class_name, known), g.box)
               for g in gts]
    else:
        known = sorted({r.class_name for r in (*gts, *dets)} - {UNKNOWN_NAME})

    result = compute_map(dets, gts, classes=known, iou_thresh=args.iou,
                         use_11point=args.use_11point)
    a_ose = compute_aose(dets, gts, known_set=known, iou_thresh=args.iou,
                         score_thresh=args.aose_score_thresh)
    wi = compute_wi(dets, gts, known_set=known, iou_thresh=args.iou,
                    recall_level=args.wi_recall_level)

    def fmt(v):
        return "undefined" if v is None else f"{v:.6f}"

    print(f"mAP@{args.iou:g}: {fmt(result.mean)}")
    for name in known:
        if name in result.per_class:
            print(f"  {name}: {result.per_class[name]:.6f}")
    print(f"A-OSE: {a_ose}")
    print(f"WI@{args.wi_recall_level:g}: {fmt(wi)}")
    return EXIT_OK


def _export_names(args) -> list[str]:
    if args.names:
        names = [n.strip() for n in args.names.split(",") if n.strip()]
    elif args.names_file:
        path = Path(args.names_file)
        if not path.exists():
            raise FileNotFoundError(f"no such names file: {path}")
        names = [ln.strip() for ln in path.read_text(encoding="utf-8").splitlines()
                 if ln.strip() and not ln.strip().startswith("#")]
    else:
        raise ConfigError("--random-dim needs --names or --names-file")
    if not names:
        raise ConfigError("the class name list is empty")
    return names


def cmd_export_topology(args) -> int:
    if args.anchors_file:
        topo = load_anchors(args.anchors_file, normalize=args.normalize)
    elif args.random_dim:
        topo = generate_random_anchors(_export_names(args), args.random_dim, args.seed)
    else:
        raise ConfigError("give either --anchors-file or --random-dim")
    topo.save(args.out)
    print(f"wrote {len(topo.anchors)} anchors of dim {topo.dim} to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="topodet",
        description="Anchor-constrained open-world detection experiments.")
    parser.add_argument("--verbose", "-v", action="store_true",
                        help="log task progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write the synthetic benchmark files")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("run", help="run the incremental protocol end to end")
    p.add_argument("--config", required=True)
    p.add_argument("--output", help="override output_dir from the config")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="score a detection file against ground truth")
    p.add_argument("--gt", required=True)
    p.add_argument("--det", required=True)
    p.add_argument("--schedule", help="schedule file for time-point relabeling")
    p.add_argument("--task", type=int, help="time point t used with --schedule")
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--aose-score-thresh", type=float, default=0.05)
    p.add_argument("--wi-recall-level", type=float, default=0.8)
    p.add_argument("--use-11point", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-topology", help="build and save an anchor topology")
    p.add_argument("--out", required=True)
    p.add_argument("--anchors-file", help="load anchors from a file")
    p.add_argument("--normalize", action="store_true",
                   help="L2-normalize vectors on file ingest")
    p.add_argument("--random-dim", type=int,
                   help="generate random unit anchors of this dimension")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--names", help="comma-separated class names (random source)")
    p.add_argument("--names-file", help="file of class names, one per line")
    p.set_defaults(func=cmd_export_topology)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (AnchorFileError, DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, ProtocolError, TopologyError, MetricsError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ModelError, OpenWorldError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
