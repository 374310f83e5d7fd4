"""Command-line interface.

Subcommands: gen-rirs, make-dataset, train, eval, bench.  Each reads a TOML
config file plus a few flag overrides.  Exit codes: 0 success, 1 input or
configuration error (with usage where relevant), 2 internal invariant
violation.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import harness, trainer
from .acoustics import AcousticPath, RoomSpec, image_method_rir, read_rir
from .errors import ConfigurationError, InputError, InternalInvariantError
from .model import ModelDims, count_params_flops, init_params, load_checkpoint, save_checkpoint

REFERENCE_PARAM_COUNT = 1_119_752
REFERENCE_FLOP_COUNT = 1_419_520


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise InputError(message)


def _load_toml(path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError:
        raise InputError(f"config file not found: {path}")
    except tomllib.TOMLDecodeError as exc:
        raise InputError(f"malformed config {path}: {exc}")


def _check_keys(cfg: dict, allowed: set, context: str) -> None:
    unknown = set(cfg) - allowed
    if unknown:
        raise ConfigurationError(f"unknown {context} keys: {sorted(unknown)}")


def _parse_eta(value):
    if value is None or value == "inf":
        return None
    return float(value)


def _parse_snr(value):
    if value is None or value == "off":
        return None
    return float(value)


# ---------------------------------------------------------------------------

_SCENARIO_KEYS = {
    "noise", "duration_s", "snr_db", "eta", "n_taps", "subbands", "skip_factor",
    "runs", "seed", "mu", "rir_dir", "primary_index", "switch_index",
    "primary_len", "secondary_len", "t60", "curve_window",
}


def load_scenario(path) -> tuple[harness.Scenario, dict]:
    cfg = _load_toml(path)
    _check_keys(cfg, _SCENARIO_KEYS, "scenario")
    n_taps = int(cfg.get("n_taps", 1024))
    subbands = int(cfg.get("subbands", 32))
    primary_index = int(cfg.get("primary_index", 0))
    switch_index = cfg.get("switch_index")
    if "rir_dir" in cfg:
        rir_dir = Path(cfg["rir_dir"])
        with open(rir_dir / "index.json") as fh:
            index = json.load(fh)
        primary, _ = read_rir(rir_dir / index["primary"][primary_index])
        secondary, _ = read_rir(rir_dir / index["secondary"])
        primary_after = None
        if switch_index is not None:
            primary_after, _ = read_rir(rir_dir / index["primary"][int(switch_index)])
    else:
        room = dict(harness.PAPER_ROOM)
        if "t60" in cfg:
            room["t60"] = float(cfg["t60"])
        spec = RoomSpec(dimensions=tuple(room["dimensions"]),
                        source_pos=tuple(room["cube_center"]),
                        speaker_pos=tuple(room["speaker"]),
                        error_mic_pos=tuple(room["error_mic"]),
                        t60=room["t60"], sound_speed=room["sound_speed"])
        positions = harness.reference_positions(room["cube_center"], room["cube_edge"])
        p_len = int(cfg.get("primary_len", 2 * n_taps))
        s_len = int(cfg.get("secondary_len", n_taps))
        primary = image_method_rir(spec, positions[primary_index], room["error_mic"], p_len)
        secondary = image_method_rir(spec, room["speaker"], room["error_mic"], s_len)
        primary_after = None
        if switch_index is not None:
            primary_after = image_method_rir(spec, positions[int(switch_index)],
                                             room["error_mic"], p_len)
    scenario = harness.Scenario(
        noise=str(cfg["noise"]), duration_s=float(cfg["duration_s"]),
        primary=primary, secondary=secondary,
        snr_db=_parse_snr(cfg.get("snr_db")), eta=_parse_eta(cfg.get("eta")),
        primary_after=primary_after, skip_factor=int(cfg.get("skip_factor", 0)),
        runs=int(cfg.get("runs", 1)), seed=int(cfg.get("seed", 0)),
        n_taps=n_taps, subbands=subbands)
    extras = {"mu": cfg.get("mu"), "curve_window": int(cfg.get("curve_window", 2000))}
    return scenario, extras


def _cmd_gen_rirs(args) -> int:
    room = {}
    if args.config:
        cfg = _load_toml(args.config)
        _check_keys(cfg, {"dimensions", "speaker", "error_mic", "cube_center",
                          "cube_edge", "t60", "sound_speed", "primary_len",
                          "secondary_len"}, "gen-rirs")
        room = {k: v for k, v in cfg.items() if k not in ("primary_len", "secondary_len")}
        primary_len = int(cfg.get("primary_len", args.primary_len))
        secondary_len = int(cfg.get("secondary_len", args.secondary_len))
    else:
        primary_len, secondary_len = args.primary_len, args.secondary_len
    index = harness.generate_room_rirs(args.out, primary_len, secondary_len, room or None)
    print(json.dumps({"out": str(args.out), "primary": len(index["primary"]),
                      "secondary": index["secondary"]}))
    return 0


_DATASET_KEYS = {"corpus_dir", "rir_dir", "out", "snr_set", "eta_set",
                 "clip_seconds", "count", "seed"}


def _cmd_make_dataset(args) -> int:
    cfg = _load_toml(args.config)
    _check_keys(cfg, _DATASET_KEYS, "dataset")
    manifest = harness.make_dataset(
        corpus_dir=cfg["corpus_dir"],
        snr_set=cfg.get("snr_set", [0, 5, 10, 15, 20, 25, 30]),
        eta_set=[_parse_eta(e) for e in cfg.get("eta_set", [0.1, 1.0, 10.0, "inf"])],
        clip_seconds=float(cfg.get("clip_seconds", 3.0)),
        count=int(cfg["count"]), seed=int(cfg.get("seed", 0)),
        rir_dir=cfg.get("rir_dir"), out_path=args.out or cfg.get("out"))
    print(json.dumps({"count": manifest["count"], "train": manifest["train"],
                      "val": manifest["val"]}))
    return 0


_TRAIN_KEYS = {
    "n_taps", "subbands", "hidden", "meta_frames", "decimation", "step_size",
    "batch_size", "learning_rate", "lr_decay", "patience", "variant",
    "grad_clip", "max_epochs", "seed", "manifest", "synthetic",
}
_SYNTH_KEYS = {"episodes", "duration_s", "primary_len", "secondary_len",
               "band_lo", "band_hi", "snr_db", "eta", "holdout", "t60",
               "clip_samples"}


def _cmd_train(args) -> int:
    cfg = _load_toml(args.config)
    _check_keys(cfg, _TRAIN_KEYS, "train")
    dims = ModelDims(n_taps=int(cfg["n_taps"]), subbands=int(cfg["subbands"]),
                     hidden=int(cfg["hidden"]))
    config = trainer.MetaConfig(
        meta_frames=int(cfg.get("meta_frames", 8)),
        decimation=int(cfg.get("decimation", dims.decimation)),
        step_size=float(cfg.get("step_size", 0.4)),
        batch_size=int(cfg.get("batch_size", 150)),
        learning_rate=float(cfg.get("learning_rate", 1e-4)),
        lr_decay=float(cfg.get("lr_decay", 0.5)),
        patience=int(cfg.get("patience", 3)),
        variant=str(cfg.get("variant", "whole-path")),
        grad_clip=float(cfg["grad_clip"]) if "grad_clip" in cfg else None)
    seed = int(cfg.get("seed", 0))
    if "synthetic" in cfg:
        synth = dict(cfg["synthetic"])
        _check_keys(synth, _SYNTH_KEYS, "train.synthetic")
        episodes = harness.make_synthetic_episodes(
            count=int(synth.get("episodes", 200)),
            duration_s=float(synth.get("duration_s", 1.0)),
            primary_len=int(synth.get("primary_len", 2 * dims.n_taps)),
            secondary_len=int(synth.get("secondary_len", dims.n_taps)),
            band=(float(synth.get("band_lo", 200.0)), float(synth.get("band_hi", 1800.0))),
            snr_db=_parse_snr(synth.get("snr_db", 30.0)),
            eta=np.inf if _parse_eta(synth.get("eta", "inf")) is None
            else float(synth['eta']),
            seed=seed,
            room={"t60": float(synth["t60"])} if "t60" in synth else None)
        holdout = int(synth.get("holdout", max(1, len(episodes) // 10)))
        train_eps, val_eps = episodes[:-holdout], episodes[-holdout:]
        clip_samples = int(synth["clip_samples"]) if "clip_samples" in synth else None
    elif "manifest" in cfg:
        with open(cfg["manifest"]) as fh:
            manifest = json.load(fh)
        train_eps = [harness.materialize_episode(e, manifest)
                     for e in manifest["episodes"] if e["split"] == "train"]
        val_eps = [harness.materialize_episode(e, manifest)
                   for e in manifest["episodes"] if e["split"] == "val"]
        clip_samples = None
    else:
        raise ConfigurationError("train config needs either 'manifest' or a [synthetic] table")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    params = init_params(dims, seed)
    best, log = trainer.train(config, dims, train_eps, val_eps, params,
                              max_epochs=int(cfg.get("max_epochs", 20)), seed=seed,
                              log_path=out_dir / "log.jsonl", checkpoint_dir=out_dir,
                              clip_samples=clip_samples)
    print(json.dumps({"epochs": len(log), "best_val_L_M": min(r["val_L_M"] for r in log),
                      "checkpoint": str(out_dir / "best.ckpt")}))
    return 0


def _cmd_eval(args) -> int:
    scenario, extras = load_scenario(args.scenario)
    checkpoint = load_checkpoint(args.checkpoint) if args.checkpoint else None
    if checkpoint is not None and (checkpoint.dims.n_taps != scenario.n_taps
                                   or checkpoint.dims.subbands != scenario.subbands):
        raise ConfigurationError("checkpoint dimensions do not match the scenario")
    controller = harness.build_controller(args.controller, scenario, checkpoint,
                                          mu=extras["mu"])
    trace, metrics, timing = harness.run_episode(
        controller, scenario, curve_window=extras["curve_window"])
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    tag = metrics.controller_id
    nmse_path = out_dir / f"nmse_{tag}.csv"
    with open(nmse_path, "w") as fh:
        fh.write("sample_index,nmse_db\n")
        for idx, db in metrics.nmse_curve:
            fh.write(f"{int(idx)},{db:.6f}\n")
    psd_path = out_dir / f"psd_{tag}.csv"
    with open(psd_path, "w") as fh:
        fh.write("hz,anc_off_db,anc_on_db\n")
        for hz, off, on in zip(metrics.psd_hz, metrics.psd_off_db, metrics.psd_on_db):
            fh.write(f"{hz:.3f},{off:.6f},{on:.6f}\n")
    summary = {
        "controller": tag, "scenario_digest": metrics.scenario_digest,
        "nmse_db": metrics.nmse_db, "nmse_db_runs": metrics.nmse_db_runs,
        "scheduled_updates": timing.scheduled_updates,
        "executed_updates": timing.executed_updates,
        "update_median_ms": timing.median_ms, "update_budget_ms": timing.budget_ms,
        "files": {"nmse": str(nmse_path), "psd": str(psd_path)},
    }
    with open(out_dir / f"summary_{tag}.json", "w") as fh:
        json.dump(summary, fh, indent=2)
    print(json.dumps(summary))
    return 0


_BENCH_KEYS = {"n_taps", "subbands", "hidden", "controller", "checkpoint",
               "iterations", "skip_factor", "seed", "mu"}


def _cmd_bench(args) -> int:
    cfg = _load_toml(args.config) if args.config else {}
    _check_keys(cfg, _BENCH_KEYS, "bench")
    n_taps = int(cfg.get("n_taps", 1024))
    subbands = int(cfg.get("subbands", 32))
    hidden = int(cfg.get("hidden", 128))
    name = str(cfg.get("controller", "mdsaf"))
    skip = int(cfg.get("skip_factor", 0))
    if name in ("mdsaf", "mdsaf-md"):
        if cfg.get("checkpoint"):
            params = load_checkpoint(cfg["checkpoint"])
        else:
            params = init_params(ModelDims(n_taps, subbands, hidden),
                                 int(cfg.get("seed", 0)))
        controller = harness.MdsafController(
            params, mu=float(cfg.get("mu", 0.4)), skip_factor=skip,
            variant="whole-path" if name == "mdsaf" else "main-delay")
        counts = count_params_flops(params)
    elif name == "dsnfxlms":
        controller = harness.DsnfxlmsController(n_taps, subbands,
                                                mu=float(cfg.get("mu", 0.01)),
                                                skip_factor=skip)
        counts = None
    else:
        raise InputError(f"bench supports mdsaf, mdsaf-md or dsnfxlms, not {name!r}")
    report = harness.measure_update_time(controller,
                                         iterations=int(cfg.get("iterations", 200)),
                                         seed=int(cfg.get("seed", 0)))
    payload = {
        "controller": name, "n_taps": n_taps, "subbands": subbands, "hidden": hidden,
        "median_ms": report.median_ms, "mean_ms": report.mean_ms,
        "max_ms": report.max_ms, "count": report.count,
        "budget_ms": report.budget_ms, "satisfied": report.satisfied,
    }
    if counts is not None:
        payload.update({
            "param_count": counts["param_count"],
            "flops_per_update": counts["flops_per_update"],
            "reference_param_count": REFERENCE_PARAM_COUNT,
            "reference_flops_per_update": REFERENCE_FLOP_COUNT,
            "note": ("internal block sizes are not fully pinned by the published "
                     "figures; counts are reported side by side rather than matched"),
        })
    out = json.dumps(payload, indent=2)
    if args.out:
        Path(args.out).write_text(out + "\n")
    print(out)
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="anclab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-rirs", help="write room impulse response cache files")
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--primary-len", type=int, default=2048)
    p.add_argument("--secondary-len", type=int, default=1024)
    p.set_defaults(func=_cmd_gen_rirs)

    p = sub.add_parser("make-dataset", help="build a deterministic episode manifest")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_make_dataset)

    p = sub.add_parser("train", help="meta-train the learned update rule")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="run a controller over a scenario")
    p.add_argument("--scenario", required=True)
    p.add_argument("--controller", required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("bench", help="measure the per-update real-time budget")
    p.add_argument("--config", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except (InputError, ConfigurationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except InternalInvariantError as exc:
        print(f"internal invariant violation: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
