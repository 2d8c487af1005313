"""Command line entry point: ``keymatch3d <subcommand> [--config FILE] --out DIR``.

Every subcommand reads a flat ``key=value`` config file, lets ``--key value``
flags override it, and writes the resolved configuration to
``<out>/config.txt`` next to its outputs. ``KEYMATCH3D_SEED`` overrides the
config seed; an explicit ``--seed`` wins over the environment.

Exit codes: 0 success, 1 usage or configuration-file error, 2 data or
domain error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import depthsynth as ds
from . import evaluation as ev
from . import net
from . import train as tr
from ._validation import ConfigurationError, DomainError, TrainingError
from .sampling import SamplingConfig, lift_keypoints

logger = logging.getLogger("keymatch3d")

SEED_ENV = "KEYMATCH3D_SEED"
CONFIG_ECHO = "config.txt"


class UsageError(Exception):
    pass


SYNTH_KEYS = {
    "mesh": "builtin:engine",
    "count": 500,
    "seed": 0,
    "width": 64,
    "height": 64,
    "fov_deg": 60.0,
    "max_angle_deg": 20.0,
    "translation_fraction": 0.15,
    "min_overlap": 0.2,
    "noise": "none",
    "sigma_base": 0.002,
    "sigma_quadratic": 0.002,
    "dropout_prob": 0.02,
    "edge_shadow_width": 2,
    "calibration_views": 100,
}

TRAIN_KEYS = {k: v for k, v in tr.TrainConfig().to_kv().items()}

REPO_KEYS = {
    "checkpoint": "",
    "dataset": "",
    "views": 50,
    "extractor": "network",
    "t": 0,
    "mode": "top-score",
    "seed": 0,
    "tau_pos": 0.025,
    "depth_lookup": "nearest",
}

EVAL_KEYS = dict(REPO_KEYS, repo="", views=0, tau_eval=0.05)

MATCH_KEYS = {
    "checkpoint": "",
    "dataset": "",
    "pair": 0,
    "t": 0,
    "mode": "top-score",
    "seed": 0,
    "tau_eval": 0.05,
    "depth_lookup": "nearest",
}

COMMANDS = {
    "synth-pairs": (SYNTH_KEYS, "render pose-annotated depth pairs of a mesh"),
    "train": (TRAIN_KEYS, "train the detector/descriptor on a pair dataset"),
    "build-repo": (REPO_KEYS, "build a descriptor repository from dataset views"),
    "eval": (EVAL_KEYS, "match test views against a repository"),
    "match": (MATCH_KEYS, "visualize descriptor matches between the two views of a pair"),
}


# --------------------------------------------------------------------------
# configuration


def _coerce(key, value, default):
    if isinstance(default, str):
        return str(value)
    try:
        return type(default)(value)
    except ValueError:
        raise UsageError(f"bad value for {key}: {value!r}") from None


def resolve_config(keys: dict, config_path=None, overrides=None, env=None) -> dict:
    """Defaults, then the config file, then ``KEYMATCH3D_SEED``, then flags."""
    cfg = dict(keys)
    if config_path is not None:
        path = Path(config_path)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        kv = ds.read_kv(path)
        unknown = sorted(set(kv) - set(keys))
        if unknown:
            raise UsageError(f"{path}: unknown config keys: {', '.join(unknown)}")
        cfg.update({k: _coerce(k, v, keys[k]) for k, v in kv.items()})
    env = os.environ if env is None else env
    if "seed" in keys and env.get(SEED_ENV, "") != "":
        cfg["seed"] = _coerce("seed", env[SEED_ENV], keys["seed"])
    for k, v in (overrides or {}).items():
        if v is not None:
            cfg[k] = _coerce(k, v, keys[k])
    return cfg


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="keymatch3d", description="Keypoint detector/descriptor learning on synthetic depth pairs.")
    sub = p.add_subparsers(dest="command", metavar="{" + ",".join(COMMANDS) + "}", parser_class=_Parser)
    sub.required = True
    for name, (keys, help_text) in COMMANDS.items():
        sp = sub.add_parser(name, help=help_text, description=help_text)
        sp.add_argument("--config", help="key=value configuration file")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--threads", type=int, default=1, help="BLAS worker threads (default 1, deterministic)")
        sp.add_argument("-v", "--verbose", action="store_true")
        if name == "train":
            sp.add_argument("--resume", help="checkpoint to continue from")
        for k, default in keys.items():
            sp.add_argument("--" + k.replace("_", "-"), dest=f"key_{k}", metavar=type(default).__name__.upper(),
                            help=f"default: {default!r}")
    return p


# --------------------------------------------------------------------------
# subcommands


def _noise(cfg):
    if cfg["noise"] == "none":
        return None
    if cfg["noise"] != "gaussian":
        raise ConfigurationError(f"noise must be 'none' or 'gaussian', got {cfg['noise']!r}")
    return ds.NoiseParams(cfg["sigma_base"], cfg["sigma_quadratic"], cfg["dropout_prob"], cfg["edge_shadow_width"])


def cmd_synth_pairs(cfg, out: Path, args):
    mesh = ds.resolve_mesh(cfg["mesh"])
    K = ds.default_intrinsics(cfg["width"], cfg["height"], cfg["fov_deg"])
    d_min, d_max = ds.calibrate_depth_range(mesh, K, cfg["seed"], cfg["calibration_views"])
    bounds = (np.deg2rad(cfg["max_angle_deg"]), cfg["translation_fraction"] * mesh.bounding_radius)
    pairs = ds.generate_pairs(mesh, K, cfg["count"], bounds, _noise(cfg), cfg["seed"], min_overlap=cfg["min_overlap"])
    ds.write_dataset(out, pairs, K, d_min, d_max, cfg["seed"], _noise(cfg), extra={"mesh": cfg["mesh"]})
    logger.info("wrote %d pairs to %s (depth range %.4f..%.4f m)", cfg["count"], out, d_min, d_max)


def cmd_train(cfg, out: Path, args):
    tcfg = tr.TrainConfig.from_kv(cfg)
    if not tcfg.dataset:
        raise UsageError("train needs dataset=<dir> (config key or --dataset)")
    data = ds.read_dataset(tcfg.dataset)

    def progress(rec):
        if rec.iter % 100 == 0:
            logger.info("iter %d total %.4f npos %d nneg %d", rec.iter, rec.total, rec.npos, rec.nneg)

    tr.train(tcfg, data, out, resume=args.resume, progress=progress)


def _load_model(cfg):
    if not cfg["checkpoint"]:
        raise UsageError("checkpoint=<file> is required for the network extractor")
    path = Path(cfg["checkpoint"])
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    params, _, echo = net.read_checkpoint(path)
    return params, float(echo["d_min"]), float(echo["d_max"])


def _extractor(cfg):
    if cfg.get("extractor", "network") == "baseline":
        return ev.RandomPatchExtractor(cfg["t"] or net.NetConfig().t, net.NetConfig().box_size, cfg["seed"])
    if cfg.get("extractor", "network") != "network":
        raise ConfigurationError(f"extractor must be 'network' or 'baseline', got {cfg['extractor']!r}")
    params, d_min, d_max = _load_model(cfg)
    return ev.NetworkExtractor(params, d_min, d_max, cfg["t"] or None, cfg["mode"], cfg["seed"])


def _dataset(cfg):
    if not cfg["dataset"]:
        raise UsageError("dataset=<dir> is required")
    return ds.read_dataset(cfg["dataset"])


def _views(data, n):
    views = list(data.views())
    return views[:n] if n > 0 else views


def cmd_build_repo(cfg, out: Path, args):
    data = _dataset(cfg)
    sampling = SamplingConfig(cfg["tau_pos"], cfg["depth_lookup"])
    repo = ev.build_repository(_extractor(cfg), _views(data, cfg["views"]), data.intrinsics, sampling)
    ev.write_repository(out / "repository.kmrp", repo)
    logger.info("repository: %d entries of dimension %d", len(repo), repo.dim)


def cmd_eval(cfg, out: Path, args):
    if not cfg["repo"]:
        raise UsageError("repo=<file> is required")
    if not Path(cfg["repo"]).is_file():
        raise FileNotFoundError(f"repository not found: {cfg['repo']}")
    repo = ev.read_repository(cfg["repo"])
    data = _dataset(cfg)
    ext = _extractor(cfg)
    if ext.dim != repo.dim:
        raise DomainError(f"extractor descriptors have dimension {ext.dim}, repository has {repo.dim}")
    agg, _ = ev.evaluate(ext, _views(data, cfg["views"]), data.intrinsics, repo, cfg["tau_eval"],
                         csv_path=out / "results.csv")
    print(f"accuracy {agg.accuracy:.4f} ({agg.true_matches}/{agg.queries})")


def cmd_match(cfg, out: Path, args):
    data = _dataset(cfg)
    if not 0 <= cfg["pair"] < len(data):
        raise DomainError(f"pair {cfg['pair']} outside dataset of {len(data)} pairs")
    pair = data.pair(cfg["pair"])
    ext = _extractor(cfg)
    sampling = SamplingConfig(depth_lookup=cfg["depth_lookup"])
    xa, fa = ext(pair.depth_a, 2 * cfg["pair"])
    xb, fb = ext(pair.depth_b, 2 * cfg["pair"] + 1)
    pa, va = lift_keypoints(xa, pair.depth_a, pair.pose_a, data.intrinsics, sampling)
    pb, vb = lift_keypoints(xb, pair.depth_b, pair.pose_b, data.intrinsics, sampling)
    idx, ddist = ev.nearest_neighbors(fa, fb)
    d3 = np.full(len(xa), np.inf)
    both = va & vb[idx]
    d3[both] = np.linalg.norm(pa[both] - pb[idx[both]], axis=1)
    with open(out / "matches.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("u_a", "v_a", "u_b", "v_b", "descriptor_distance", "distance_3d", "is_true"))
        for k, j in enumerate(idx):
            w.writerow([repr(float(xa[k, 0])), repr(float(xa[k, 1])), repr(float(xb[j, 0])), repr(float(xb[j, 1])),
                        repr(float(ddist[k])), repr(float(d3[k])), int(d3[k] < cfg["tau_eval"])])
    ev.render_matches(pair.depth_a, pair.depth_b, [(xa[k], xb[j]) for k, j in enumerate(idx)], out / "matches.ppm")
    print(f"{int((d3 < cfg['tau_eval']).sum())}/{len(idx)} matches within {cfg['tau_eval']} m")


HANDLERS = {
    "synth-pairs": cmd_synth_pairs,
    "train": cmd_train,
    "build-repo": cmd_build_repo,
    "eval": cmd_eval,
    "match": cmd_match,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        keys = COMMANDS[args.command][0]
        overrides = {k: getattr(args, f"key_{k}") for k in keys}
        cfg = resolve_config(keys, args.config, overrides)
    except SystemExit as e:  # --help
        return int(e.code or 0)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        ds.write_kv(out / CONFIG_ECHO, {"command": args.command, **cfg})
        with threadpool_limits(limits=max(1, args.threads)):
            HANDLERS[args.command](cfg, out, args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except TrainingError as e:
        dump = f" (batch dumped to {e.dump_path})" if e.dump_path else ""
        print(f"error: {e}{dump}", file=sys.stderr)
        return 2
    except (DomainError, ConfigurationError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
