"""Command line pipeline: synth, targets, train-mem, infer, track, eval, report.

Every command is deterministic given its seed: rerunning with identical
arguments produces byte-identical outputs. ``MODAL_PANOPTIC_SEED`` overrides
the configured seed (useful in CI).
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import dataio
from .cloud import PanopticLabeling, Taxonomy
from .dataio import RunConfig
from .membership import MembershipTrainConfig, train_membership_stage2
from .metrics import LstqAccumulator, PqAccumulator, lstq_report_csv, pq_report_csv
from .mlp import load_model, save_model
from .pipeline import (
    build_extent_model,
    infer_sequence,
    membership_factory_mlp,
    membership_factory_nn,
    membership_factory_oracle,
    prepare_sweep_inputs,
    default_gates,
)
from .synth import (
    DetectorNoise,
    HandcraftedFeatures,
    SceneConfig,
    default_taxonomy,
    generate_sequence,
)
from .targets import (
    ExtentStrategy,
    aggregate_extent,
    build_trajectories,
    class_wise_mean_extents,
    membership_target,
    modal_center,
    render_bev_targets,
    save_cwm_stats,
    velocity_target,
)
from .tracking import PipelineConfig, panoptic_track_sequence
from .voxels import GridSpec

EXIT_USAGE = 2
EXIT_MISSING_INPUT = 3
EXIT_BAD_DATA = 4


class MissingInput(FileNotFoundError):
    pass


def _seed_of(args) -> int:
    env = os.environ.get("MODAL_PANOPTIC_SEED")
    return int(env) if env else args.seed


def _strategy(args, trajectories=None, taxonomy=None) -> ExtentStrategy:
    name = args.strategy.upper()
    if name == "DSB":
        return ExtentStrategy("DSB", dsb_min_points=args.dsb_min_points)
    if name == "CWM":
        if trajectories is None:
            raise ValueError("CWM needs trajectories to derive class means")
        stats = class_wise_mean_extents(trajectories, taxonomy)
        return ExtentStrategy("CWM", cwm_stats=stats)
    return ExtentStrategy(name)


def _noise(args) -> DetectorNoise:
    return DetectorNoise(
        center_jitter=args.center_jitter,
        confidence_noise=args.confidence_noise,
        drop_probability=args.drop_probability,
        semantic_flip_probability=args.semantic_flip,
        velocity_noise=args.velocity_noise,
    )


def _grid(args) -> GridSpec:
    return GridSpec((args.voxel_size, args.voxel_size, args.voxel_size_z),
                    args.planar_range, args.z_min, args.z_max, args.bev_downsample)


def _add_grid_args(p):
    p.add_argument("--voxel-size", type=float, default=0.1)
    p.add_argument("--voxel-size-z", type=float, default=0.2)
    p.add_argument("--planar-range", type=float, default=40.0)
    p.add_argument("--z-min", type=float, default=-2.0)
    p.add_argument("--z-max", type=float, default=3.0)
    p.add_argument("--bev-downsample", type=int, default=2)


def _add_noise_args(p):
    p.add_argument("--center-jitter", type=float, default=0.0)
    p.add_argument("--confidence-noise", type=float, default=0.0)
    p.add_argument("--drop-probability", type=float, default=0.0)
    p.add_argument("--semantic-flip", type=float, default=0.0)
    p.add_argument("--velocity-noise", type=float, default=0.0)


def _add_infer_args(p):
    p.add_argument("--strategy", default="MAX", choices=["SW", "MAX", "CWM", "DSB"])
    p.add_argument("--dsb-min-points", type=int, default=40)
    p.add_argument("--membership", default="nn", choices=["nn", "mlp", "oracle"])
    p.add_argument("--model", help="checkpoint path (required for --membership mlp)")
    p.add_argument("--features", default="full", choices=["geo", "geo+bev", "full"])
    p.add_argument("--nms-threshold", type=float, default=0.3)
    p.add_argument("--nms-max-detections", type=int, default=500)
    p.add_argument("--margin-frac", type=float, default=0.1)
    p.add_argument("--margin-floor", type=float, default=0.25)
    p.add_argument("--conflict", default="first_wins", choices=["first_wins", "argmax"])
    _add_grid_args(p)
    _add_noise_args(p)


def _feature_flags(name: str) -> tuple[bool, bool]:
    return {"geo": (False, False), "geo+bev": (False, True), "full": (True, True)}[name]


def _synth_one(task) -> str:
    root, name, cfg, taxonomy = task
    seq, registry = generate_sequence(cfg, taxonomy)
    dataio.write_sequence(root, name, seq, taxonomy)
    _write_registry(Path(root) / "sequences" / name / "registry.json", registry)
    return name


def _write_registry(path, registry) -> None:
    import json

    payload = {
        "period": registry.config.period,
        "sweep_times": registry.sweep_times,
        "instances": {
            str(iid): {
                "class_id": inst.class_id,
                "half_extent": [float(v) for v in inst.half_extent],
                "base_center": [float(v) for v in inst.base_center],
                "velocity": [float(v) for v in inst.velocity],
            }
            for iid, inst in sorted(registry.instances.items())
        },
    }
    Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n",
                          encoding="utf-8")


def cmd_synth(args) -> int:
    seed = _seed_of(args)
    taxonomy = default_taxonomy(args.min_instance_points)
    pair_gap = tuple(args.pair_gap) if args.pair_gap else None
    tasks = []
    for i in range(args.sequences):
        cfg = SceneConfig(
            seed=seed + i,
            sweep_count=args.sweeps,
            period=args.period,
            count_range=(args.min_instances, args.max_instances),
            speed_range=(args.min_speed, args.max_speed),
            points_per_m2=args.density,
            motion=args.motion,
            pair_gap_range=pair_gap,
            row_partners=args.row_partners,
            min_separation=args.min_separation,
            max_range=args.max_range,
            occlusion=not args.no_occlusion,
        )
        tasks.append((args.out, f"{i:04d}", cfg, taxonomy))
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            names = list(pool.map(_synth_one, tasks))
    else:
        names = [_synth_one(t) for t in tasks]
    print(f"wrote {len(names)} sequences under {args.out}")
    return 0


def cmd_targets(args) -> int:
    taxonomy = dataio.dataset_taxonomy(args.data)
    spec = _grid(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    all_trajectories = []
    for name in dataio.list_sequences(args.data):
        seq = dataio.read_sequence(args.data, name)
        trajectories = build_trajectories(seq, taxonomy)
        all_trajectories.extend(trajectories.values())
        strategy = _strategy(args, trajectories, taxonomy)
        per_traj = {iid: aggregate_extent(tr, strategy) for iid, tr in trajectories.items()}
        seq_out = out / name
        seq_out.mkdir(parents=True, exist_ok=True)
        for t, sweep in enumerate(seq.sweeps):
            instances, extents, velocities = [], [], {}
            for iid, traj in trajectories.items():
                rec = traj.record_at(t)
                if rec is None:
                    continue
                agg_extents, excluded = per_traj[iid]
                row = [i for i, r in enumerate(traj.records) if r.sweep_index == t][0]
                if excluded[row]:
                    continue
                pose_inv = np.linalg.inv(sweep.ego_pose)
                center = pose_inv[:3, :3] @ rec.center + pose_inv[:3, 3]
                instances.append(replace_center(rec, center))
                extents.append(agg_extents[row])
                velocities[iid] = velocity_target(traj, t, seq.period)
            rendered = render_bev_targets(instances, velocities, spec,
                                          taxonomy.num_channels, extents=extents)
            frame = f"{t:06d}"
            np.save(seq_out / f"{frame}_heatmaps.npy", rendered.heatmaps)
            np.save(seq_out / f"{frame}_height.npy", rendered.height)
            np.save(seq_out / f"{frame}_velocity.npy", rendered.velocity)
            np.save(seq_out / f"{frame}_valid.npy", rendered.valid_mask)
            rows = _membership_rows(sweep, trajectories, t)
            np.save(seq_out / f"{frame}_membership.npy", rows)
    stats = class_wise_mean_extents(all_trajectories, taxonomy)
    save_cwm_stats(stats, out / "cwm.tsv")
    print(f"wrote targets for {len(dataio.list_sequences(args.data))} sequences to {out}")
    return 0


def replace_center(rec, center):
    from .targets import ModalInstance

    return ModalInstance(rec.instance_id, rec.class_id, center, rec.extent,
                         rec.point_count, rec.sweep_timestamp, rec.sweep_index)


def _membership_rows(sweep, trajectories, sweep_index) -> np.ndarray:
    """(detection_index, point_index, label) triples for GT-center RoIs."""
    from .membership import Detection, roi_points

    xyz = sweep.xyz
    rows = []
    det_index = 0
    for iid, traj in sorted(trajectories.items()):
        rec = traj.record_at(sweep_index)
        if rec is None:
            continue
        members = np.flatnonzero(sweep.inst_labels == iid)
        if members.size == 0:
            continue
        center = modal_center(xyz[members])
        det = Detection(center, 1.0, traj.class_id, traj.max_extent)
        roi = roi_points(det, xyz, inflate=False)
        if roi.size == 0:
            det_index += 1
            continue
        labels = membership_target(members, roi)
        for p, lab in zip(roi, labels):
            rows.append((det_index, int(p), int(lab)))
        det_index += 1
    return np.asarray(rows, dtype=np.int64) if rows else np.zeros((0, 3), dtype=np.int64)


def cmd_train_mem(args) -> int:
    taxonomy = dataio.dataset_taxonomy(args.data)
    spec = _grid(args)
    include_point, include_bev = _feature_flags(args.features)
    provider = HandcraftedFeatures(spec) if (include_point or include_bev) else None
    sequences = [dataio.read_sequence(args.data, name)
                 for name in dataio.list_sequences(args.data)]
    cfg = MembershipTrainConfig(
        num_classes=taxonomy.num_channels,
        point_feature_dim=HandcraftedFeatures.DIM if include_point else 0,
        bev_feature_dim=HandcraftedFeatures.DIM if include_bev else 0,
        include_point_features=include_point,
        include_bev=include_bev,
        center_jitter=args.train_jitter,
        margin_floor=args.margin_floor,
        epochs=args.epochs,
        learning_rate=args.learning_rate,
        optimizer=args.optimizer,
        batch_size=args.batch_size,
        hidden_dims=tuple([args.hidden] * 3),
        seed=_seed_of(args),
    )
    model, trace = train_membership_stage2(sequences, taxonomy, cfg, provider)
    save_model(model, args.out)
    if args.trace:
        lines = ["epoch,bce"] + [f"{i},{v:.17g}" for i, v in enumerate(trace)]
        Path(args.trace).write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"trained {args.features} membership model -> {args.out} "
          f"(final BCE {trace[-1]:.4f})")
    return 0


def _run_inference(args, track: bool) -> int:
    taxonomy = dataio.dataset_taxonomy(args.data)
    spec = _grid(args)
    include_point, include_bev = _feature_flags(args.features)
    needs_features = args.membership == "mlp" and (include_point or include_bev)
    provider = HandcraftedFeatures(spec) if needs_features else None
    seed = _seed_of(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name in dataio.list_sequences(args.data):
        seq = dataio.read_sequence(args.data, name)
        trajectories = build_trajectories(seq, taxonomy)
        strategy = _strategy(args, trajectories, taxonomy)
        inputs = prepare_sweep_inputs(seq, taxonomy, spec, strategy, _noise(args),
                                      registry=None, provider=provider, seed=seed)
        pcfg = PipelineConfig(
            nms_threshold=args.nms_threshold,
            nms_max_detections=args.nms_max_detections,
            margin_frac=args.margin_frac,
            margin_floor=args.margin_floor,
            conflict=args.conflict,
            gates=default_gates(trajectories, taxonomy) or None,
            max_age=args.max_age if track else 2,
        )
        if args.membership == "mlp":
            if not args.model:
                raise MissingInput("--membership mlp requires --model")
            model = load_model(args.model)
            cfg = MembershipTrainConfig(
                num_classes=taxonomy.num_channels,
                point_feature_dim=HandcraftedFeatures.DIM if include_point else 0,
                bev_feature_dim=HandcraftedFeatures.DIM if include_bev else 0,
                include_point_features=include_point,
                include_bev=include_bev,
            )
            factory = membership_factory_mlp(model, cfg.pair_config())
        elif args.membership == "oracle":
            factory = membership_factory_oracle()
        else:
            factory = membership_factory_nn(pcfg)
        if track:
            labelings = panoptic_track_sequence(inputs, taxonomy, spec, factory,
                                                seq.period, pcfg)
        else:
            labelings = infer_sequence(inputs, taxonomy, spec, factory, pcfg)
        dataio.write_predictions(out, name, labelings)
    print(f"wrote predictions to {out}")
    return 0


def cmd_infer(args) -> int:
    return _run_inference(args, track=False)


def cmd_track(args) -> int:
    return _run_inference(args, track=True)


def cmd_eval(args) -> int:
    taxonomy = dataio.dataset_taxonomy(args.data)
    pq = PqAccumulator(taxonomy)
    lstq = LstqAccumulator(taxonomy)
    for name in dataio.list_sequences(args.data):
        seq = dataio.read_sequence(args.data, name)
        preds = dataio.read_predictions(args.pred, name)
        if len(preds) != len(seq):
            raise ValueError(f"{name}: prediction sweep count mismatch")
        gts = [PanopticLabeling(s.sem_labels, s.inst_labels) for s in seq.sweeps]
        for gt, pred in zip(gts, preds):
            pq.add(gt, pred)
        lstq.add_sequence(gts, preds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "pq.csv").write_text(pq_report_csv(pq.report()), encoding="utf-8")
    (out / "lstq.csv").write_text(lstq_report_csv(lstq.report()), encoding="utf-8")
    rep = pq.report()
    lrep = lstq.report()
    print(f"PQ {rep.pq:.4f}  PQ_dagger {rep.pq_dagger:.4f}  mIoU {rep.miou:.4f}  "
          f"S_assoc {lrep.s_assoc:.4f}  LSTQ {lrep.lstq:.4f}")
    return 0


def _read_csv_value(path, row_name, column):
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    header = lines[0].split(",")
    for line in lines[1:]:
        cells = line.split(",")
        if cells[0] == row_name:
            return float(cells[header.index(column)])
    raise ValueError(f"{path}: no row {row_name!r}")


def cmd_report(args) -> int:
    runs = []
    for spec in args.runs:
        if "=" not in spec:
            raise ValueError(f"--runs entries look like name=EVALDIR, got {spec!r}")
        name, _, path = spec.partition("=")
        path = Path(path)
        if not (path / "pq.csv").exists():
            raise MissingInput(f"{path}/pq.csv does not exist")
        entry = {"name": name, "pq": _read_csv_value(path / "pq.csv", "all", "pq")}
        lstq_path = path / "lstq.csv"
        if lstq_path.exists():
            entry["lstq"] = _read_csv_value(lstq_path, "lstq", "value")
        acc_path = path / "membership.csv"
        if acc_path.exists():
            entry["membership_acc"] = _read_csv_value(acc_path, "accuracy", "value")
        runs.append(entry)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    columns = ["name", "pq"] + (["lstq"] if any("lstq" in r for r in runs) else []) \
        + (["membership_acc"] if any("membership_acc" in r for r in runs) else [])
    lines = [",".join(columns)]
    for r in runs:
        lines.append(",".join(str(r.get(c, "")) for c in columns))
    (out / "table.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    (out / "chart.svg").write_text(_bar_chart_svg(runs), encoding="utf-8")
    print("\n".join(lines))
    return 0


def _bar_chart_svg(runs) -> str:
    """Simple PQ bar chart; deterministic text output."""
    width, height, pad = 640, 360, 48
    bar_zone = width - 2 * pad
    n = max(len(runs), 1)
    bar_w = bar_zone / n * 0.6
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" '
        f'stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
        f'<text x="{pad}" y="{pad - 12}" font-size="14">PQ by run</text>',
    ]
    for i, r in enumerate(runs):
        x = pad + bar_zone * (i + 0.2) / n
        h = (height - 2 * pad) * max(0.0, min(1.0, r["pq"]))
        y = height - pad - h
        parts.append(f'<rect x="{x:.1f}" y="{y:.1f}" width="{bar_w:.1f}" height="{h:.1f}" '
                     f'fill="#4878b0"/>')
        parts.append(f'<text x="{x:.1f}" y="{height - pad + 16}" font-size="12">'
                     f'{r["name"]}</text>')
        parts.append(f'<text x="{x:.1f}" y="{y - 4:.1f}" font-size="12">{r["pq"]:.3f}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="modalpanoptic",
                                     description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic labeled dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sequences", type=int, default=1)
    p.add_argument("--sweeps", type=int, default=10)
    p.add_argument("--period", type=float, default=0.5)
    p.add_argument("--min-instances", type=int, default=3)
    p.add_argument("--max-instances", type=int, default=4)
    p.add_argument("--min-speed", type=float, default=0.5)
    p.add_argument("--max-speed", type=float, default=4.0)
    p.add_argument("--density", type=float, default=40.0)
    p.add_argument("--motion", default="pass", choices=["pass", "drift", "static"])
    p.add_argument("--pair-gap", type=float, nargs=2, metavar=("LO", "HI"))
    p.add_argument("--row-partners", type=int, default=1)
    p.add_argument("--min-separation", type=float, default=7.0)
    p.add_argument("--max-range", type=float, default=38.0)
    p.add_argument("--min-instance-points", type=int, default=15)
    p.add_argument("--no-occlusion", action="store_true")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("targets", help="dump detection/membership training targets")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--strategy", default="MAX", choices=["SW", "MAX", "CWM", "DSB"])
    p.add_argument("--dsb-min-points", type=int, default=40)
    _add_grid_args(p)
    p.set_defaults(func=cmd_targets)

    p = sub.add_parser("train-mem", help="train the membership pair scorer")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--trace")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--features", default="full", choices=["geo", "geo+bev", "full"])
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--learning-rate", type=float, default=5e-4)
    p.add_argument("--optimizer", default="sgd", choices=["sgd", "adam"])
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--train-jitter", type=float, default=0.2)
    p.add_argument("--margin-floor", type=float, default=0.25)
    _add_grid_args(p)
    p.set_defaults(func=cmd_train_mem)

    p = sub.add_parser("infer", help="per-sweep panoptic fusion")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    _add_infer_args(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("track", help="fusion plus temporal association")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-age", type=int, default=2)
    _add_infer_args(p)
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("eval", help="PQ and LSTQ against ground truth")
    p.add_argument("--data", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="comparison table and SVG chart across runs")
    p.add_argument("--runs", nargs="+", required=True, metavar="NAME=EVALDIR")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    for sub_parser in sub.choices.values():
        sub_parser.add_argument("--config", help="run-config file of key = value lines")
    return parser


# Run-config keys -> CLI argument names (flags still override the file).
_CONFIG_TO_ARG = {
    "seed": "seed",
    "voxel_size_x": "voxel_size",
    "voxel_size_z": "voxel_size_z",
    "planar_range": "planar_range",
    "z_min": "z_min",
    "z_max": "z_max",
    "bev_downsample": "bev_downsample",
    "extent_strategy": "strategy",
    "dsb_min_points": "dsb_min_points",
    "nms_threshold": "nms_threshold",
    "nms_max_detections": "nms_max_detections",
    "roi_margin_frac": "margin_frac",
    "roi_margin_floor": "margin_floor",
    "conflict": "conflict",
    "membership": "membership",
    "max_age": "max_age",
    "center_jitter": "center_jitter",
    "confidence_noise": "confidence_noise",
    "drop_probability": "drop_probability",
    "semantic_flip_probability": "semantic_flip",
    "velocity_noise": "velocity_noise",
    "train_epochs": "epochs",
    "train_learning_rate": "learning_rate",
    "train_batch_size": "batch_size",
    "train_center_jitter": "train_jitter",
    "train_hidden": "hidden",
    "features": "features",
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    parser = build_parser()
    try:
        if known.config:
            if not Path(known.config).exists():
                raise MissingInput(f"config file {known.config} does not exist")
            cfg = dataio.parse_run_config(known.config)
            defaults = {arg: getattr(cfg, key) for key, arg in _CONFIG_TO_ARG.items()}
            for sub_action in parser._subparsers._group_actions:
                for sub in sub_action.choices.values():
                    sub.set_defaults(**{k: v for k, v in defaults.items()
                                        if any(a.dest == k for a in sub._actions)})
        args = parser.parse_args(argv)
        return args.func(args)
    except (FileNotFoundError, MissingInput) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING_INPUT
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_DATA


if __name__ == "__main__":
    sys.exit(main())
