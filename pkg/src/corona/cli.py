"""Command-line interface: ``corona {simulate,solve,label,train,eval}``.

Every config field has a flag; a JSON ``--config`` file, when given, is
applied on top of the flags. Each command writes a ``config.json`` echo next
to its outputs.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
import time
import typing
from pathlib import Path

import numpy as np

from corona import io as cio
from corona.baselines import SvdFilterConfig, WallFilterConfig, svd_filter, wall_filter
from corona.metrics import RoiBox, fista_mse_curve, mip, profile_from_linear, report, to_db
from corona.network import forward, init_from_ista, init_random, load_weights, save_weights
from corona.prox import RegWeights
from corona.sim import SimConfig, simulate
from corona.solver import SolverConfig, solve
from corona.tensor import fold, unfold
from corona.training import (
    TrainConfig,
    TrainPair,
    extract_patches,
    label_with_solver,
    read_checkpoint,
    recombine_patches,
    train,
)

log = logging.getLogger("corona")


@dataclasses.dataclass(frozen=True)
class SolverFlags:
    """Flat view of :class:`SolverConfig` for the command line."""

    lambda1: float = 0.02
    lambda2: float = 0.001
    max_iters: int = 30_000
    rel_tol: float = 1e-7
    lipschitz: typing.Optional[float] = None
    variant: str = "fista"

    def build(self) -> SolverConfig:
        return SolverConfig(RegWeights(self.lambda1, self.lambda2), self.max_iters, self.rel_tol, self.lipschitz,
                            self.variant)


SECTIONS = {
    "sim": SimConfig,
    "solver": SolverFlags,
    "train": TrainConfig,
    "svd": SvdFilterConfig,
    "wall": WallFilterConfig,
}
SKIP_FLAGS = {"sim": {"seed"}, "train": {"seed"}}


def _field_kind(cls, f: dataclasses.Field):
    hint = typing.get_type_hints(cls)[f.name]
    optional = type(None) in typing.get_args(hint)
    if optional:
        hint = next(a for a in typing.get_args(hint) if a is not type(None))
    origin = typing.get_origin(hint)
    if origin is tuple:
        args = typing.get_args(hint)
        return "tuple", args, optional
    return hint, None, optional


def add_section_flags(parser: argparse.ArgumentParser, section: str) -> None:
    cls = SECTIONS[section]
    group = parser.add_argument_group(f"{section} options")
    for f in dataclasses.fields(cls):
        if f.name in SKIP_FLAGS.get(section, ()):
            continue
        kind, args, _ = _field_kind(cls, f)
        flag = "--" + f.name.replace("_", "-")
        dest = f"{section}__{f.name}"
        default = f.default
        help_ = f"default: {default}"
        if kind is bool:
            group.add_argument(flag, dest=dest, action=argparse.BooleanOptionalAction, default=None, help=help_)
        elif kind == "tuple":
            group.add_argument(flag, dest=dest, nargs=len(args), type=args[0], default=None, help=help_)
        else:
            group.add_argument(flag, dest=dest, type=kind, default=None, help=help_)


def build_section(section: str, ns: argparse.Namespace, file_cfg: dict | None, **fixed):
    """Defaults, then command-line flags, then the config file section."""
    cls = SECTIONS[section]
    names = {f.name for f in dataclasses.fields(cls)}
    values = {}
    for name in names:
        v = getattr(ns, f"{section}__{name}", None)
        if v is not None:
            values[name] = tuple(v) if isinstance(v, list) else v
    if file_cfg and section in file_cfg:
        sec = file_cfg[section]
        unknown = set(sec) - names
        if unknown:
            raise SystemExit(f"config section {section!r}: unknown keys {sorted(unknown)}")
        for k, v in sec.items():
            values[k] = tuple(v) if isinstance(v, list) else v
    values.update(fixed)
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise SystemExit(f"invalid {section} configuration: {exc}") from exc


def load_config_file(path) -> dict:
    if path is None:
        return {}
    cfg = cio.read_json(path)
    unknown = set(cfg) - set(SECTIONS)
    if unknown:
        raise SystemExit(f"config file: unknown sections {sorted(unknown)}")
    return cfg


def echo(out: Path, command: str, argv, **sections) -> None:
    doc = {"command": command, "argv": list(argv)}
    for name, cfg in sections.items():
        doc[name] = cfg.to_dict() if hasattr(cfg, "to_dict") else dataclasses.asdict(cfg)
    cio.write_json(doc, out / "config.json")


# -- simulate ----------------------------------------------------------------


def cmd_simulate(ns, argv) -> int:
    file_cfg = load_config_file(ns.config)
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    base = build_section("sim", ns, file_cfg, seed=ns.seed)
    manifest = cio.DatasetManifest(root=out)
    for i in range(ns.n_samples):
        cfg = dataclasses.replace(base, seed=ns.seed + i)
        sample = simulate(cfg)
        sid = f"sample_{i:04d}"
        files = {}
        for role in ("D", "L", "S", "N"):
            name = f"{sid}_{role}.npy"
            cio.write_movie(getattr(sample, role), out / name, ns.dtype)
            files[role] = name
        manifest.samples.append(cio.ManifestEntry(sid, files, sample.D.shape, "simulated", cfg.seed))
        log.info("simulated %s (seed %d)", sid, cfg.seed)
    manifest.write(out / "manifest.json")
    echo(out, "simulate", argv, sim=base)
    return 0


# -- solve -------------------------------------------------------------------


def _run_method(movie, method, solver_cfg, svd_cfg, wall_cfg, net, records):
    if method in ("ista", "fista"):
        cfg = dataclasses.replace(solver_cfg, variant=method)
        L, S, st = solve(unfold(movie), cfg=cfg)
        records.append({"iterations": st.iter, "converged": st.converged, "lipschitz": st.lipschitz,
                        "objective": st.objective_history})
        return fold(L, movie.shape), fold(S, movie.shape)
    if method == "svd":
        return None, svd_filter(movie, svd_cfg)
    if method == "wall":
        return None, wall_filter(movie, wall_cfg)
    if method == "corona":
        L, S = forward(movie, net)
        return L, S
    raise SystemExit(f"unknown method {method!r}")


def cmd_solve(ns, argv) -> int:
    file_cfg = load_config_file(ns.config)
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    solver_flags = build_section("solver", ns, file_cfg)
    solver_cfg = solver_flags.build()
    svd_cfg = build_section("svd", ns, file_cfg)
    wall_cfg = build_section("wall", ns, file_cfg)
    if ns.method == "corona" and not ns.weights:
        raise SystemExit("--weights is required for method corona")
    net = load_weights(ns.weights) if ns.method == "corona" else None
    movie = cio.read_movie(ns.input).astype(np.complex128)
    records: list[dict] = []
    t0 = time.perf_counter()
    if ns.patch:
        pieces = extract_patches(movie, tuple(ns.patch), ns.overlap)
        l_parts, s_parts = [], []
        for patch, origin in pieces:
            L, S = _run_method(patch, ns.method, solver_cfg, svd_cfg, wall_cfg, net, records)
            s_parts.append((S, origin))
            if L is not None:
                l_parts.append((L, origin))
        S = recombine_patches(s_parts, movie.shape)
        L = recombine_patches(l_parts, movie.shape) if l_parts else None
    else:
        L, S = _run_method(movie, ns.method, solver_cfg, svd_cfg, wall_cfg, net, records)
    elapsed = time.perf_counter() - t0

    if L is None:
        cio.write_movie(S, out / "filtered.npy", ns.dtype)
    else:
        cio.write_movie(L, out / "L.npy", ns.dtype)
        cio.write_movie(S, out / "S.npy", ns.dtype)
    summary = {"method": ns.method, "patchwise": bool(ns.patch), "seconds": elapsed}
    if ns.truth_s:
        truth = cio.read_movie(ns.truth_s)
        summary["mse_S"] = float(np.vdot(S - truth, S - truth).real)
    log_path = out / "log.jsonl"
    if log_path.exists():
        log_path.unlink()
    for i, rec in enumerate(records):
        cio.append_jsonl({"patch": i, **rec}, log_path)
    cio.append_jsonl({"summary": summary}, log_path)
    echo(out, "solve", argv, solver=solver_flags, svd=svd_cfg, wall=wall_cfg)
    return 0


# -- label -------------------------------------------------------------------


def _input_movies(ns):
    if ns.manifest:
        man = cio.DatasetManifest.read(ns.manifest)
        for e in man.samples:
            yield e.id, cio.read_movie(man.path(e, "D"))
    for p in ns.input or ():
        yield Path(p).stem, cio.read_movie(p)


def cmd_label(ns, argv) -> int:
    file_cfg = load_config_file(ns.config)
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    solver_flags = build_section("solver", ns, file_cfg)
    manifest = cio.DatasetManifest(root=out)
    for name, movie in _input_movies(ns):
        pieces = extract_patches(movie.astype(np.complex128), tuple(ns.patch), ns.overlap)
        pairs = label_with_solver([p for p, _ in pieces], solver_flags.build())
        for (patch, origin), pair in zip(pieces, pairs):
            sid = f"{name}_t{origin[0]}_y{origin[1]}_x{origin[2]}"
            files = {}
            for role, arr in (("D", pair.d_patch), ("L", pair.l_target), ("S", pair.s_target)):
                files[role] = f"{sid}_{role}.npy"
                cio.write_movie(arr, out / files[role], ns.dtype)
            manifest.samples.append(cio.ManifestEntry(sid, files, patch.shape, "solver-labeled", None))
    manifest.write(out / "manifest.json")
    echo(out, "label", argv, solver=solver_flags)
    return 0


# -- train -------------------------------------------------------------------


def load_pairs(manifest_path, patch_shape, overlap) -> list[TrainPair]:
    man = cio.DatasetManifest.read(manifest_path)
    pairs = []
    for e in man.samples:
        D, L, S = (cio.read_movie(man.path(e, r)).astype(np.complex128) for r in ("D", "L", "S"))
        shape = tuple(min(a, b) for a, b in zip(patch_shape, D.shape))
        for (d, _), (s, _), (l_, _) in zip(
            extract_patches(D, shape, overlap), extract_patches(S, shape, overlap), extract_patches(L, shape, overlap)
        ):
            pairs.append(TrainPair(d, s, l_, e.provenance))
    return pairs


def cmd_train(ns, argv) -> int:
    file_cfg = load_config_file(ns.config)
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = build_section("train", ns, file_cfg, seed=ns.seed)
    adam = None
    if ns.resume:
        net, adam = read_checkpoint(ns.resume)
    elif ns.init == "ista":
        net = init_from_ista(ns.layers, ns.init_lipschitz, jitter=ns.jitter, seed=ns.seed)
    else:
        net = init_random(ns.layers, seed=ns.seed)
    stage1 = load_pairs(ns.stage1, cfg.patch_shape, cfg.overlap) if ns.stage1 else None
    stage2 = load_pairs(ns.stage2, cfg.patch_shape, cfg.overlap) if ns.stage2 else None
    save_weights(net, out / "initial.weights")
    history_path = out / "history.jsonl"
    if history_path.exists():
        history_path.unlink()
    res = train(net, stage1, stage2, cfg, on_epoch=lambda r: cio.append_jsonl(r, history_path),
                checkpoint_dir=out / "checkpoints", adam=adam)
    history_path.touch()
    save_weights(res.net, out / "corona.weights")
    echo(out, "train", argv, train=cfg)
    return 0


# -- eval --------------------------------------------------------------------


def _named(items) -> dict[str, str]:
    out = {}
    for item in items or ():
        name, _, path = item.partition("=")
        if not path:
            raise SystemExit(f"expected NAME=PATH, got {item!r}")
        out[name] = path
    return out


def _box(text: str) -> RoiBox:
    vals = [int(v) for v in text.split(",")]
    if len(vals) != 4:
        raise SystemExit(f"ROI must be row,col,height,width; got {text!r}")
    return RoiBox(*vals)


def cmd_eval(ns, argv) -> int:
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    preds = {k: cio.read_movie(v) for k, v in _named(ns.pred).items()}
    preds_l = {k: cio.read_movie(v) for k, v in _named(ns.pred_l).items()}
    rois = {}
    for item in ns.roi or ():
        name, _, box = item.partition(":")
        rois[name] = _box(box)
    if rois and ns.background is None:
        raise SystemExit("--background is required with --roi")

    images = {}
    for name, movie in preds.items():
        img = mip(movie)
        images[name] = img
        db = to_db(img, ns.floor_db)
        np.save(out / f"mip_{name}.npy", db)
        cio.write_pgm(db, out / f"mip_{name}.pgm", ns.floor_db)
    result: dict = {}
    if rois:
        rows = report(images, rois, _box(ns.background))
        table = ["method,roi,cnr_db,cr_db"] + [f"{r.method},{r.roi},{r.cnr_db:.6g},{r.cr_db:.6g}" for r in rows]
        cio.atomic_write(out / "report.csv", ("\n".join(table) + "\n").encode())
        result["report"] = [dataclasses.asdict(r) for r in rows]
    if ns.profile_row is not None:
        result["profiles"] = {
            name: [None if not np.isfinite(v) else float(v) for v in profile_from_linear(img, ns.profile_row, ns.floor_db)]
            for name, img in images.items()
        }
    if ns.truth_s:
        truth_s = cio.read_movie(ns.truth_s)
        truth_l = cio.read_movie(ns.truth_l) if ns.truth_l else None
        mse = {}
        for name, movie in preds.items():
            entry = {"mse_S": float(np.vdot(movie - truth_s, movie - truth_s).real)}
            if truth_l is not None and name in preds_l:
                d = preds_l[name] - truth_l
                entry["mse_L"] = float(np.vdot(d, d).real)
                entry["mse_avg"] = 0.5 * (entry["mse_S"] + entry["mse_L"])
            mse[name] = entry
        result["mse"] = mse
        if ns.curve_iters and ns.input and truth_l is not None:
            file_cfg = load_config_file(ns.config)
            solver_flags = build_section("solver", ns, file_cfg)
            ks = [int(k) for k in ns.curve_iters.split(",")]
            D = cio.read_movie(ns.input).astype(np.complex128)
            curve = fista_mse_curve(D, truth_s, truth_l, ks, solver_flags.build())
            result["fista_mse_curve"] = [dict(zip(("k", "mse_S", "mse_L", "mse_avg"), c)) for c in curve]
    cio.write_json(result, out / "report.json")
    echo(out, "eval", argv)
    return 0


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="corona", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate synthetic (D, L, S, N) movies")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--n-samples", type=int, default=1)
    s.add_argument("--out", required=True)
    s.add_argument("--dtype", choices=["<c8", "<c16"], default="<c8")
    s.add_argument("--config")
    add_section_flags(s, "sim")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("solve", help="separate a movie with ista/fista/svd/wall/corona")
    s.add_argument("--input", required=True)
    s.add_argument("--method", choices=["ista", "fista", "svd", "wall", "corona"], default="fista")
    s.add_argument("--out", required=True)
    s.add_argument("--weights", help="weight file (method corona)")
    s.add_argument("--patch", type=int, nargs=3, metavar=("T", "H", "W"))
    s.add_argument("--overlap", type=float, default=0.5)
    s.add_argument("--truth-s")
    s.add_argument("--dtype", choices=["<c8", "<c16"], default="<c8")
    s.add_argument("--config")
    for sec in ("solver", "svd", "wall"):
        add_section_flags(s, sec)
    s.set_defaults(func=cmd_solve)

    s = sub.add_parser("label", help="label movie patches with FISTA for training")
    s.add_argument("--manifest")
    s.add_argument("--input", nargs="*")
    s.add_argument("--out", required=True)
    s.add_argument("--patch", type=int, nargs=3, default=[20, 32, 32], metavar=("T", "H", "W"))
    s.add_argument("--overlap", type=float, default=0.5)
    s.add_argument("--dtype", choices=["<c8", "<c16"], default="<c16")
    s.add_argument("--config")
    add_section_flags(s, "solver")
    s.set_defaults(func=cmd_label)

    s = sub.add_parser("train", help="train the unfolded network")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--stage1", help="manifest of simulated samples")
    s.add_argument("--stage2", help="manifest of solver-labeled samples")
    s.add_argument("--out", required=True)
    s.add_argument("--layers", type=int, default=10)
    s.add_argument("--init", choices=["ista", "random"], default="ista")
    s.add_argument("--init-lipschitz", type=float, default=2.0)
    s.add_argument("--jitter", type=float, default=0.01)
    s.add_argument("--resume", help="checkpoint .weights file to continue from")
    s.add_argument("--config")
    add_section_flags(s, "train")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="MIP images, CNR/CR report, profiles, MSE")
    s.add_argument("--pred", action="append", help="NAME=PATH of a separated (S) movie; repeatable")
    s.add_argument("--pred-l", action="append", help="NAME=PATH of the matching L movie")
    s.add_argument("--truth-s")
    s.add_argument("--truth-l")
    s.add_argument("--input", help="input movie D, for the FISTA MSE curve")
    s.add_argument("--curve-iters", help="comma-separated iteration counts, e.g. 1,10,50")
    s.add_argument("--roi", action="append", help="NAME:row,col,height,width; repeatable")
    s.add_argument("--background", help="row,col,height,width")
    s.add_argument("--profile-row", type=int)
    s.add_argument("--floor-db", type=float, default=-60.0)
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    add_section_flags(s, "solver")
    s.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    ns = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    return ns.func(ns, argv)


if __name__ == "__main__":
    sys.exit(main())
