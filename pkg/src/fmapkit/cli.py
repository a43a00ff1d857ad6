"""Command-line pipeline: precompute, match, train, refine, eval, export-desc.

Exit codes: 0 success, 1 computational failure, 2 usage or IO error.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from filelock import FileLock

from .convert import fmap_to_pointmap, icp_refine, read_pointmap, write_pointmap, zoomout
from .evaluate import pointwise_geodesic_errors, write_report
from .features.network import ExtractorConfig, ExtractorNet
from .features.training import (
    TrainConfig,
    TrainPair,
    TrainShape,
    TrainState,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .fmap import (
    FuncMap,
    SolveContext,
    gt_from_pointmap,
    gt_from_template,
    read_fmap,
    solve_regularized,
    write_fmap,
)
from .mesh import MeshParseError, MeshTopologyError, load_mesh, normalize_mesh
from .spectral import (
    hks,
    hks_default_times,
    load_basis,
    mesh_basis,
    project,
    reconstruct,
    save_basis,
    wks,
    wks_default_energies,
    xyz_descriptor,
)

logger = logging.getLogger("fmapkit")

DEFAULT_CONFIG = {
    "k": 30,
    "lambda": 1e-3,
    "descriptor": {"kind": "wks", "count": 100},
    "normalization": "unit_area",
    "up_axis": "Y",
    "cache_dir": ".fmapkit_cache",
    "seed": 0,
    "zoomout": {"k_final": 90, "step": 2},
    "icp_iterations": 10,
    "checkpoint": None,
    "extractor": ExtractorConfig().to_dict(),
    "train": {"lr_initial": 1e-3, "lr_final": 1e-4, "batch_size": 4, "total_steps": 1000, "augment": True},
    "thresholds": [i / 100 for i in range(0, 26)],
}


class UsageError(Exception):
    """Bad arguments, missing files or malformed inputs (exit code 2)."""


def _merge(base, override):
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def load_config(args):
    """Defaults, then the JSON config file, then command-line overrides."""
    config = copy.deepcopy(DEFAULT_CONFIG)
    if args.config:
        config = _merge(config, json.loads(_read(args.config)))
    for flag, key in (("k", "k"), ("lam", "lambda"), ("seed", "seed")):
        value = getattr(args, flag, None)
        if value is not None:
            config[key] = value
    if os.environ.get("FMAPKIT_CACHE"):
        config["cache_dir"] = os.environ["FMAPKIT_CACHE"]
    if config["k"] < 2 or config["lambda"] < 0:
        raise UsageError("config requires k >= 2 and lambda >= 0")
    return config


def _read(path):
    try:
        return Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror}") from exc


class Manifest:
    """Shapes ``{id, path}`` and pairs ``{source, target, [id], [gt | template_maps]}``."""

    def __init__(self, path):
        self.path = Path(path)
        doc = json.loads(_read(path))
        root = self.path.parent
        self.shapes = {s["id"]: root / s["path"] for s in doc.get("shapes", [])}
        self.pairs = {}
        for p in doc.get("pairs", []):
            pid = p.get("id", f"{p['source']}-{p['target']}")
            for key in ("source", "target"):
                if p[key] not in self.shapes:
                    raise UsageError(f"pair {pid}: unknown shape id {p[key]!r}")
            entry = dict(p, id=pid)
            if "gt" in p:
                entry["gt"] = root / p["gt"]
            if "template_maps" in p:
                entry["template_maps"] = [root / q for q in p["template_maps"]]
            self.pairs[pid] = entry

    def pair(self, pid):
        if pid not in self.pairs:
            raise UsageError(f"unknown pair {pid!r}")
        return self.pairs[pid]


class Workspace:
    """Mesh loading and the spectral cache for one config."""

    def __init__(self, config, manifest):
        self.config = config
        self.manifest = manifest
        self.cache_dir = Path(config["cache_dir"])
        self.width = max(config["k"], config["zoomout"]["k_final"])
        self._meshes = {}

    def mesh(self, sid):
        if sid not in self._meshes:
            if sid not in self.manifest.shapes:
                raise UsageError(f"unknown shape {sid!r}")
            mesh = load_mesh(self.manifest.shapes[sid], up_axis=self.config["up_axis"])
            self._meshes[sid] = normalize_mesh(mesh, self.config["normalization"])
        return self._meshes[sid]

    def cache_path(self, sid):
        return self.cache_dir / f"{sid}.spec"

    def cached_basis(self, sid):
        """Cached basis if it matches the current mesh and is wide enough."""
        path = self.cache_path(sid)
        if not path.exists():
            return None
        try:
            basis, digest = load_basis(path)
        except ValueError:
            return None
        width = min(self.width, self.mesh(sid).n_vertices - 1)
        if digest != self.mesh(sid).content_hash() or basis.k < width:
            return None
        return basis

    def basis(self, sid, compute=True):
        basis = self.cached_basis(sid)
        if basis is None:
            if not compute:
                return None
            mesh = self.mesh(sid)
            basis = mesh_basis(mesh, min(self.width, mesh.n_vertices - 1))
            self.cache_dir.mkdir(parents=True, exist_ok=True)
            with FileLock(str(self.cache_dir / ".lock")):
                save_basis(basis, self.cache_path(sid), mesh.content_hash())
        return basis

    def descriptors(self, sid, basis, checkpoint=None):
        spec = self.config["descriptor"]
        kind = spec.get("kind", "wks")
        if kind == "hks":
            times = spec.get("times") or hks_default_times(basis, spec.get("count", 16))
            return hks(basis, times).values
        if kind == "wks":
            energies, sigma = wks_default_energies(basis, spec.get("count", 100))
            return wks(basis, spec.get("energies", energies), spec.get("sigma", sigma)).values
        if kind == "xyz":
            return xyz_descriptor(self.mesh(sid)).values
        if kind == "learned":
            net = self.network(checkpoint)
            return net.describe(self.mesh(sid).vertices).values
        raise UsageError(f"unknown descriptor kind {kind!r}")

    def train_config(self, total_steps=None):
        t = self.config["train"]
        return TrainConfig(
            k=self.config["k"],
            lam=self.config["lambda"],
            lr_initial=t["lr_initial"],
            lr_final=t["lr_final"],
            total_steps=total_steps or t["total_steps"],
            batch_size=t["batch_size"],
            seed=self.config["seed"],
            augment=t["augment"],
            extractor=ExtractorConfig(**self.config["extractor"]),
        )

    def network(self, checkpoint=None):
        checkpoint = checkpoint or self.config.get("checkpoint")
        if not checkpoint:
            raise UsageError("learned descriptors need a checkpoint (--checkpoint)")
        if not Path(checkpoint).exists():
            raise UsageError(f"checkpoint {checkpoint} not found")
        state = load_checkpoint(checkpoint, self.train_config())
        return ExtractorNet(state.config.extractor, params=state.params)

    def ground_truth(self, pair, k):
        """GT functional map (k x k) of a manifest pair, or ``None``."""
        bm, bn = self.basis(pair["source"]).truncate(k), self.basis(pair["target"]).truncate(k)
        if "gt" in pair:
            t = read_pointmap(pair["gt"])
            return gt_from_pointmap(bm, bn, t)
        if "template_maps" in pair:
            c_i, c_j = (read_fmap(p) for p in pair["template_maps"])
            return FuncMap(gt_from_template(c_i.c[:k, :k], c_j.c[:k, :k]).c)
        return None


def _out_dir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# Commands


def cmd_precompute(args, config):
    manifest = Manifest(_require(args.manifest, "--manifest"))
    ws = Workspace(config, manifest)
    computed = cached = failed = 0
    for sid in manifest.shapes:
        try:
            if ws.cached_basis(sid) is not None:
                cached += 1
                continue
            ws.basis(sid)
            computed += 1
        except (MeshParseError, MeshTopologyError, OSError):
            raise
        except Exception as exc:  # per-shape solver failures should not stop the batch
            logger.error("shape %s: %s", sid, exc)
            failed += 1
    print(f"{computed} computed, {cached} cached" + (f", {failed} failed" if failed else ""))
    return 1 if failed else 0


def match_pair(ws, pair, checkpoint=None, threads=1):
    """Library-level pipeline for one manifest pair: returns (C, point map)."""
    k = ws.config["k"]
    bm_full, bn_full = ws.basis(pair["source"]), ws.basis(pair["target"])
    bm, bn = bm_full.truncate(k), bn_full.truncate(k)
    f = ws.descriptors(pair["source"], bm_full, checkpoint)
    g = ws.descriptors(pair["target"], bn_full, checkpoint)
    ctx = SolveContext(project(bm, f), project(bn, g), bm.evals, bn.evals, ws.config["lambda"])
    c = solve_regularized(ctx)
    return c, fmap_to_pointmap(c, bm, bn, workers=threads)


def cmd_match(args, config):
    manifest = Manifest(_require(args.manifest, "--manifest"))
    ws = Workspace(config, manifest)
    pair = manifest.pair(args.pair)
    source = "command line" if args.lam is not None else "config"
    print(
        f"match {pair['id']}: k={config['k']} lambda={config['lambda']:g} ({source}) "
        f"descriptor={config['descriptor']['kind']}"
    )
    c, t = match_pair(ws, pair, args.checkpoint, args.threads)
    out = _out_dir(args)
    write_fmap(c, out / f"{pair['id']}.fmap")
    write_pointmap(t, out / f"{pair['id']}.p2p")
    print(f"wrote {out / (pair['id'] + '.fmap')} and {out / (pair['id'] + '.p2p')}")
    return 0


def cmd_train(args, config):
    manifest = Manifest(_require(args.manifest, "--manifest"))
    ws = Workspace(config, manifest)
    k = config["k"]
    pairs = []
    for pid, pair in manifest.pairs.items():
        gt = ws.ground_truth(pair, k)
        if gt is None:
            raise UsageError(f"training pair {pid} has no ground truth")
        shapes = [
            TrainShape(ws.mesh(s).vertices, config["up_axis"], ws.basis(s).truncate(k))
            for s in (pair["source"], pair["target"])
        ]
        pairs.append(TrainPair(shapes[0], shapes[1], gt))
    tconfig = ws.train_config()
    if args.resume:
        state = load_checkpoint(args.resume, tconfig)
    else:
        state = TrainState.initial(tconfig)
    out = _out_dir(args)
    ckpt = out / "checkpoint.kpw"
    log_path = out / "train_log.csv"
    new_log = not args.resume or not log_path.exists()
    with open(log_path, "w" if new_log else "a", newline="") as fh:
        writer = csv.writer(fh)
        if new_log:
            writer.writerow(["step", "loss", "lr"])

        def on_step(st, loss):
            writer.writerow([st.step, f"{loss:.10g}", f"{st.lr:.6g}"])
            if st.step % 100 == 0:
                save_checkpoint(st, ckpt)

        state, losses, _ = train(state, pairs, args.steps, on_step)
    save_checkpoint(state, ckpt)
    final = f", last loss {losses[-1]:.6g}" if len(losses) else ""
    print(f"trained to step {state.step}{final}; checkpoint {ckpt}")
    return 0


def cmd_refine(args, config):
    manifest = Manifest(_require(args.manifest, "--manifest"))
    ws = Workspace(config, manifest)
    pair = manifest.pair(args.pair)
    bm, bn = ws.basis(pair["source"]), ws.basis(pair["target"])
    k = config["k"]
    if args.fmap:
        c = read_fmap(args.fmap).c
    elif args.p2p:
        c = gt_from_pointmap(bm.truncate(k), bn.truncate(k), read_pointmap(args.p2p)).c
    else:
        raise UsageError("refine needs --fmap or --p2p")
    if args.method == "icp":
        iterations = args.iterations if args.iterations is not None else config["icp_iterations"]
        logger.info("icp: %d iterations", iterations)
        refined = icp_refine(c, bm, bn, iterations, workers=args.threads)
    else:
        k_final = args.k_final or config["zoomout"]["k_final"]
        step = args.step or config["zoomout"]["step"]
        if k_final > min(bm.k, bn.k):
            raise UsageError(f"cached bases have {min(bm.k, bn.k)} functions, need {k_final}")
        refined = zoomout(c, bm, bn, k_final, step, workers=args.threads)
    width = refined.shape[0]
    t = fmap_to_pointmap(refined, bm.truncate(width), bn.truncate(width), workers=args.threads)
    out = _out_dir(args)
    stem = f"{pair['id']}.{args.method}"
    write_fmap(refined, out / f"{stem}.fmap")
    write_pointmap(t, out / f"{stem}.p2p")
    print(f"wrote {out / (stem + '.fmap')} and {out / (stem + '.p2p')}")
    return 0


def cmd_eval(args, config):
    for flag, path in (("--pred", args.pred), ("--gt", args.gt), ("--mesh", args.mesh)):
        if not path or not Path(path).exists():
            raise UsageError(f"{flag} file {path} not found")
    pred, gt = read_pointmap(args.pred), read_pointmap(args.gt)
    if len(pred) != len(gt):
        raise UsageError(f"prediction has {len(pred)} entries, ground truth {len(gt)}")
    mesh = normalize_mesh(load_mesh(args.mesh, config["up_axis"]), config["normalization"])
    errors = pointwise_geodesic_errors(pred, gt, mesh)
    out = _out_dir(args)
    report = write_report(
        out / "report.json", errors, config["thresholds"], pairs=1, curve_path=out / "curve.txt"
    )
    print(f"{report['mean_error_x100']:.1f}")
    return 0


def cmd_export_desc(args, config):
    manifest = Manifest(_require(args.manifest, "--manifest"))
    ws = Workspace(config, manifest)
    net = ws.network(args.checkpoint)
    mesh = ws.mesh(args.shape)
    values = net.describe(mesh.vertices).values
    basis = ws.basis(args.shape).truncate(config["k"])
    channels = args.channels if args.channels is not None else list(range(values.shape[1]))
    bad = [c for c in channels if not 0 <= c < values.shape[1]]
    if bad:
        raise UsageError(f"channel {bad[0]} out of range [0, {values.shape[1]})")
    recon = reconstruct(basis, project(basis, values[:, channels])).values
    out = _out_dir(args)
    for col, ch in enumerate(channels):
        stem = out / f"{args.shape}.desc{ch}"
        np.savetxt(f"{stem}.txt", values[:, ch], fmt="%.9g")
        np.savetxt(f"{stem}.recon.txt", recon[:, col], fmt="%.9g")
    print(f"exported {len(channels)} channels for {args.shape}")
    return 0


def _require(value, flag):
    if not value:
        raise UsageError(f"{flag} is required")
    return value


# ---------------------------------------------------------------------------
# Entry point


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON pipeline config")
    common.add_argument("--manifest", help="JSON dataset manifest")
    common.add_argument("--k", type=int, help="spectral basis size")
    common.add_argument("--lambda", dest="lam", type=float, help="regularization weight")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, default=os.cpu_count() or 1, help="worker threads (default: all cores)")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="fmapkit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("precompute", parents=[common], help="cache spectral bases")

    p = sub.add_parser("match", parents=[common], help="functional map + point map for a pair")
    p.add_argument("pair")
    p.add_argument("--checkpoint")

    p = sub.add_parser("train", parents=[common], help="train the descriptor network")
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--resume", help="checkpoint to continue from")

    p = sub.add_parser("refine", parents=[common], help="ICP or ZoomOut refinement")
    p.add_argument("pair")
    p.add_argument("--method", choices=["icp", "zoomout"], default="zoomout")
    p.add_argument("--fmap")
    p.add_argument("--p2p")
    p.add_argument("--iterations", type=int)
    p.add_argument("--k-final", type=int)
    p.add_argument("--step", type=int)

    p = sub.add_parser("eval", parents=[common], help="mean geodesic error report")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--mesh", required=True, help="source mesh M of the maps")

    p = sub.add_parser("export-desc", parents=[common], help="export learned descriptor fields")
    p.add_argument("shape")
    p.add_argument("--checkpoint")
    p.add_argument("--channels", type=int, nargs="*")
    return parser


COMMANDS = {
    "precompute": cmd_precompute,
    "match": cmd_match,
    "train": cmd_train,
    "refine": cmd_refine,
    "eval": cmd_eval,
    "export-desc": cmd_export_desc,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(message)s",
        stream=sys.stderr,
    )
    try:
        config = load_config(args)
        return COMMANDS[args.command](args, config)
    except (UsageError, OSError, ValueError, KeyError) as exc:
        # bad arguments, unreadable or malformed files (mesh, map, config, checkpoint)
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
