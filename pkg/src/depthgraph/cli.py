"""Command-line pipeline: corrupt, estimate, enhance, synth, metrics, pipeline.

Every stage reads a ``key = value`` config file and writes into ``out_dir``.
Exit codes: 0 success, 2 I/O error, 3 parse error, 4 numeric or contract
violation.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import io
from .enhance import enhance_pair
from .forward import DEFAULT_NOISE, DEFAULT_QUANTIZER, DepthImage, NoiseModel, QuantizerParams, corrupt
from .graph import save_metric
from .metrics import C2C_SCALE, C2P_SCALE, c2c, c2p, merge_clouds, normalize_cloud, project_to_cloud
from .scenes import two_plane_scene
from .solver import SolverConfig
from .variance import ClusterParseError, estimate_sigma_cluster, fit_noise_params, read_clusters_csv

log = logging.getLogger("depthgraph")

EXIT_OK, EXIT_IO, EXIT_PARSE, EXIT_NUMERIC = 0, 2, 3, 4
SCENES = {"two_planes": two_plane_scene}
EXT = {"pgm16": ".pgm", "pfm": ".pfm"}


class StageError(Exception):
    def __init__(self, code: int, msg: str):
        super().__init__(msg)
        self.code = code


@dataclass
class PipelineConfig:
    out_dir: Path
    left: Path | None = None
    right: Path | None = None
    scene: str | None = None
    quantizer: QuantizerParams = DEFAULT_QUANTIZER
    noise: NoiseModel = DEFAULT_NOISE
    solver: SolverConfig = field(default_factory=SolverConfig)
    seed: int = 0
    dropout: float = 0.0
    fmt: str = "pgm16"

    def path(self, stem: str) -> Path:
        return self.out_dir / (stem + EXT[self.fmt])


def _num(d, key, cast, default):
    if key not in d:
        return default
    try:
        return cast(d[key])
    except ValueError:
        raise StageError(EXIT_PARSE, f"config key {key!r}: cannot parse {d[key]!r}") from None


def load_config(path, seed=None, fmt=None) -> PipelineConfig:
    try:
        d = io.read_config(path)
    except FileNotFoundError:
        raise StageError(EXIT_IO, f"config file not found: {path}") from None
    except io.FormatError as exc:
        raise StageError(EXIT_PARSE, str(exc)) from None
    base = Path(path).parent
    rel = lambda k: (base / d[k]) if k in d else None
    try:
        pq = DEFAULT_QUANTIZER
        theta, rho = _num(d, "theta", float, pq.theta), _num(d, "rho", float, pq.rho)
        x_min, x_max = _num(d, "x_min", float, pq.x_min), _num(d, "x_max", float, pq.x_max)
        if "bits" in d:
            q = QuantizerParams.from_bits(theta, rho, x_min, x_max, _num(d, "bits", int, 0))
        else:
            q = QuantizerParams.from_phi(theta, rho, x_min, x_max, _num(d, "phi", float, pq.phi))
        pn = DEFAULT_NOISE
        m = NoiseModel(
            _num(d, "alpha", float, pn.alpha),
            _num(d, "mu", float, pn.mu),
            _num(d, "kappa", float, pn.kappa),
            d.get("family", pn.family.value),
        )
        kw = {}
        for f in fields(SolverConfig):
            if f.name in d:
                kw[f.name] = _num(d, f.name, type(f.default), f.default)
        solver = SolverConfig(**kw)
    except ValueError as exc:
        raise StageError(EXIT_PARSE, f"config: {exc}") from None
    cfg = PipelineConfig(
        out_dir=rel("out_dir") or base / "out",
        left=rel("left"),
        right=rel("right"),
        scene=d.get("scene"),
        quantizer=q,
        noise=m,
        solver=solver,
        seed=_num(d, "seed", int, 0) if seed is None else seed,
        dropout=_num(d, "dropout", float, 0.0),
        fmt=fmt or d.get("format", "pgm16"),
    )
    if cfg.fmt not in EXT:
        raise StageError(EXIT_PARSE, f"config: unknown format {cfg.fmt!r}")
    if cfg.scene is not None and cfg.scene not in SCENES:
        raise StageError(EXIT_PARSE, f"config: unknown scene {cfg.scene!r}")
    if cfg.scene is None and (cfg.left is None or cfg.right is None):
        raise StageError(EXIT_PARSE, "config: give either 'scene' or both 'left' and 'right'")
    return cfg


def _read(path) -> DepthImage:
    try:
        return io.read_depth(path)
    except (FileNotFoundError, IsADirectoryError, PermissionError):
        raise StageError(EXIT_IO, f"cannot read {path}") from None
    except io.FormatError as exc:
        raise StageError(EXIT_PARSE, str(exc)) from None


def _ground_truth(cfg: PipelineConfig):
    if cfg.scene is not None:
        left, right = SCENES[cfg.scene]()
        io.write_depth(cfg.path("left_gt"), left, cfg.fmt)
        io.write_depth(cfg.path("right_gt"), right, cfg.fmt)
        return cfg.path("left_gt"), cfg.path("right_gt")
    return cfg.left, cfg.right


def cmd_corrupt(cfg: PipelineConfig):
    lp, rp = _ground_truth(cfg)
    for k, (src, stem) in enumerate(((lp, "left_observed"), (rp, "right_observed"))):
        img = _read(src)
        # separate noise streams per view: stage 0 left, stage 1 right
        out = corrupt(img, cfg.quantizer, cfg.noise, cfg.seed, cfg.dropout, stage=k)
        out.meta["source"] = Path(src).name
        io.write_depth(cfg.path(stem), out, cfg.fmt)
        log.info("wrote %s", cfg.path(stem))


def cmd_estimate(cfg: PipelineConfig, clusters_path) -> str:
    try:
        clusters = read_clusters_csv(clusters_path, cfg.quantizer)
    except FileNotFoundError:
        raise StageError(EXIT_IO, f"cannot read {clusters_path}") from None
    except ClusterParseError as exc:
        raise StageError(EXIT_PARSE, f"{clusters_path}: {exc}") from None
    lines = ["# cluster x_star_mm sigma_mm bracket_lo bracket_hi flags"]
    xs, ss = [], []
    for cid, cl in clusters:
        est = estimate_sigma_cluster(cl)
        xs.append(cl.ground_truth)
        ss.append(est.sigma)
        fl = ",".join(sorted(est.flags)) or "-"
        lines.append(f"{cid} {cl.ground_truth:.6g} {est.sigma:.6g} {est.bracket_lo:.6g} {est.bracket_hi:.6g} {fl}")
    fit = fit_noise_params(xs, ss)
    lines.append(f"alpha = {fit.model.alpha:.6g}")
    lines.append(f"mu = {fit.model.mu:.6g}")
    lines.append(f"kappa = {fit.model.kappa:.6g}")
    if fit.flags:
        lines.append("# fit flags: " + ",".join(sorted(fit.flags)))
    text = "\n".join(lines) + "\n"
    io.atomic_write(cfg.out_dir / "noise_report.txt", text.encode())
    return text


def cmd_enhance(cfg: PipelineConfig):
    left, right = _read(cfg.path("left_observed")), _read(cfg.path("right_observed"))
    res_l, res_r, _ = enhance_pair(left, right, cfg.quantizer, cfg.noise, cfg.solver, cfg.seed)
    rows = ["# view row agd_iterations objective learned_metric flags"]
    for view, res in (("left", res_l), ("right", res_r)):
        for r in res.rows:
            fl = ",".join(sorted(r.flags)) or "-"
            rows.append(f"{view} {r.row} {r.iterations} {r.objective:.10g} {int(r.learned_metric)} {fl}")
        io.write_depth(cfg.path(f"{view}_enhanced"), res.image, cfg.fmt)
    io.atomic_write(cfg.out_dir / "enhance_log.txt", ("\n".join(rows) + "\n").encode())
    save_metric(cfg.out_dir / "metric_last_row.txt", res_l.metrics[-1])


def _pair_cloud(left: DepthImage, right: DepthImage):
    return normalize_cloud(merge_clouds(project_to_cloud(left), project_to_cloud(right, (left.baseline, 0.0, 0.0))))


def cmd_synth(cfg: PipelineConfig, binary: bool = False) -> list:
    written = []
    gt = (cfg.path("left_gt"), cfg.path("right_gt")) if cfg.scene else (cfg.left, cfg.right)
    sets = {"gt": gt}
    for name in ("observed", "enhanced"):
        sets[name] = (cfg.path(f"left_{name}"), cfg.path(f"right_{name}"))
    for name, (lp, rp) in sets.items():
        if not (Path(lp).exists() and Path(rp).exists()):
            continue
        pc = _pair_cloud(_read(lp), _read(rp))
        out = cfg.out_dir / f"cloud_{name}.ply"
        io.write_ply(out, pc, binary)
        written.append(out)
    if not written:
        raise StageError(EXIT_IO, f"no depth images found in {cfg.out_dir}")
    return written


def metrics_table(ref_path, cand_paths, symmetric: bool = False) -> str:
    def load(p):
        try:
            return io.read_ply(p)
        except FileNotFoundError:
            raise StageError(EXIT_IO, f"cannot read {p}") from None
        except io.FormatError as exc:
            raise StageError(EXIT_PARSE, str(exc)) from None

    ref = load(ref_path)
    lines = ["# C2C: mean nearest-neighbour distance, reference to candidate",
             "# C2P: mean squared point-to-plane distance (6-neighbour normals)",
             f"{'name':<24} {'C2C(x1e-3)':>12} {'C2P(x1e-5)':>12}"]
    for p in cand_paths:
        cand = load(p)
        a = c2c(ref, cand, symmetric) / C2C_SCALE
        b = c2p(ref, cand, symmetric) / C2P_SCALE
        lines.append(f"{Path(p).stem:<24} {a:>12.4g} {b:>12.4g}")
    return "\n".join(lines) + "\n"


def cmd_pipeline(cfg: PipelineConfig, binary: bool = False) -> str:
    cmd_corrupt(cfg)
    cmd_enhance(cfg)
    clouds = cmd_synth(cfg, binary)
    ref = cfg.out_dir / "cloud_gt.ply"
    table = metrics_table(ref, [c for c in clouds if c != ref])
    io.atomic_write(cfg.out_dir / "metrics.txt", table.encode())
    return table


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="depthgraph", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def staged(name, help_):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", required=True, help="key = value config file")
        s.add_argument("--seed", type=int, help="override the config seed")
        s.add_argument("--format", choices=sorted(EXT), help="depth image format")
        return s

    staged("corrupt", "add sensor noise and quantization to a clean pair")
    s = staged("estimate", "estimate per-cluster noise SDs and fit the noise law")
    s.add_argument("--clusters", required=True, help="CSV: cluster_id,x_star_mm,y_mm")
    staged("enhance", "enhance the observed pair")
    s = staged("synth", "project depth pairs to PLY point clouds")
    s.add_argument("--binary", action="store_true", help="binary little-endian PLY")
    s = sub.add_parser("metrics", help="C2C / C2P table against a reference cloud")
    s.add_argument("--ref", required=True)
    s.add_argument("--cand", required=True, nargs="+")
    s.add_argument("--symmetric", action="store_true", help="average both directions")
    s = staged("pipeline", "corrupt, enhance, synth and metrics in one go")
    s.add_argument("--binary", action="store_true", help="binary little-endian PLY")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        if args.command == "metrics":
            sys.stdout.write(metrics_table(args.ref, args.cand, args.symmetric))
            return EXIT_OK
        cfg = load_config(args.config, args.seed, args.format)
        cfg.out_dir.mkdir(parents=True, exist_ok=True)
        if args.command == "corrupt":
            cmd_corrupt(cfg)
        elif args.command == "estimate":
            sys.stdout.write(cmd_estimate(cfg, args.clusters))
        elif args.command == "enhance":
            cmd_enhance(cfg)
        elif args.command == "synth":
            for p in cmd_synth(cfg, args.binary):
                print(p)
        elif args.command == "pipeline":
            sys.stdout.write(cmd_pipeline(cfg, args.binary))
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
