"""
CAUSTICA command line
render, compare, viz and test-dist commands over the photon guiding renderer
"""

import argparse
import sys
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from services.config import (
    BetaSchedule,
    ErfBackend,
    GuiderKind,
    InitializerMode,
    LightSamplerMode,
    LightTreeUpdate,
    RenderConfig,
    load_config,
)
from services.diagnostics import run_diagnostics
from services.error_handler import ImageError, exit_code_for, get_logger, safe_call
from services.export_service import export_to_csv, export_to_json
from services.guiders.gaussian import GaussianGuider
from services.image_io import read_pfm, tonemap, write_pfm, write_ppm
from services.metrics import get_metrics
from services.performance import timing_decorator
from services.renderer import RunResult, max_radius_for, run
from services.scene import Scene, load_scene
from services.viz import radius_heatmap, viz_distribution

logger = get_logger(__name__)

DEFAULT_COMPARE = "g3d,uniform,bound"


def _choices(enum_cls) -> List[str]:
    return [e.value for e in enum_cls]


def add_config_flags(p: argparse.ArgumentParser) -> None:
    """Flags mirroring RenderConfig; unset flags fall back to the environment, then defaults"""
    p.add_argument("--scene", required=True, type=Path, help="scene JSON file")
    p.add_argument("--iterations", type=int)
    p.add_argument("--photons", dest="photons_per_iteration", type=int)
    p.add_argument("--beta", type=float)
    p.add_argument("--beta-schedule", choices=_choices(BetaSchedule))
    p.add_argument("--components", type=int)
    p.add_argument("--initializer", choices=_choices(InitializerMode))
    p.add_argument("--init-photons", type=int)
    p.add_argument("--light-sampler", choices=_choices(LightSamplerMode))
    p.add_argument("--light-tree-update", choices=_choices(LightTreeUpdate))
    p.add_argument("--max-depth", type=int)
    p.add_argument("--max-radius-factor", type=float)
    p.add_argument("--workers", type=int)
    p.add_argument("--chunk-size", type=int)
    p.add_argument("--erf-backend", choices=_choices(ErfBackend))
    p.add_argument("--output-dir", type=Path)
    p.add_argument("--reference", type=Path, help="reference PFM for MSE / 1-SSIM")


CONFIG_FLAGS = (
    "iterations", "photons_per_iteration", "beta", "beta_schedule", "components", "initializer",
    "init_photons", "light_sampler", "light_tree_update", "max_depth", "max_radius_factor",
    "workers", "chunk_size", "erf_backend", "output_dir", "reference",
)


def config_from_args(args: argparse.Namespace, **extra) -> RenderConfig:
    values = {k: getattr(args, k, None) for k in CONFIG_FLAGS}
    values.update(extra)
    return load_config(**values)


def load_reference(config: RenderConfig, scene: Scene) -> Optional[np.ndarray]:
    if config.reference is None:
        return None
    ref = read_pfm(config.reference)
    expected = (scene.camera.height, scene.camera.width, 3)
    if ref.shape != expected:
        raise ImageError(f"Reference {config.reference} is {ref.shape[1]}x{ref.shape[0]}, scene renders {expected[1]}x{expected[0]}")
    return ref


def write_outputs(scene: Scene, config: RenderConfig, result: RunResult, out_dir: Path, stem: str) -> Dict[str, Path]:
    """Caustics PFM + preview, combined PFM + preview, radius heatmap, metrics CSV, summary JSON"""
    out_dir.mkdir(parents=True, exist_ok=True)
    fb = result.framebuffer
    paths = {
        "caustics": out_dir / f"{stem}.pfm",
        "preview": out_dir / f"{stem}.ppm",
        "combined": out_dir / f"{stem}_combined.pfm",
        "combined_preview": out_dir / f"{stem}_combined.ppm",
        "heatmap": out_dir / f"{stem}_radius.ppm",
        "metrics": out_dir / f"{stem}_metrics.csv",
        "summary": out_dir / f"{stem}_summary.json",
    }
    write_pfm(paths["caustics"], fb.caustics)
    write_ppm(paths["preview"], tonemap(fb.caustics))
    write_pfm(paths["combined"], fb.combined)
    write_ppm(paths["combined_preview"], tonemap(fb.combined))
    write_ppm(paths["heatmap"], radius_heatmap(fb.radius, max_radius_for(scene, config)))
    export_to_csv(result.rows, paths["metrics"])
    last = result.rows[-1]
    export_to_json(
        {
            "scene": scene.name,
            "config": config.model_dump(mode="json"),
            "guider": result.guider.describe(),
            "light_pmf": [float(p) for p in result.light_sampler.pmfs()],
            "final": {"iteration": last.iteration, "mse": last.mse, "ssim_comp": last.ssim_comp, "gathered": last.gathered},
            "metrics": get_metrics().get_metrics(),
        },
        paths["summary"],
    )
    return paths


@timing_decorator
def cmd_render(args: argparse.Namespace) -> int:
    config = config_from_args(args, guider=args.guider, seed=args.seed)
    scene = load_scene(args.scene)
    reference = load_reference(config, scene)
    result = run(scene, config, reference=reference)
    stem = args.name or f"{scene.name}_{config.guider.value}"
    paths = write_outputs(scene, config, result, config.output_dir, stem)
    for key, path in paths.items():
        print(f"{key:>16}: {path}")
    return 0


@timing_decorator
def cmd_compare(args: argparse.Namespace) -> int:
    base = config_from_args(args, seed=args.seed)
    scene = load_scene(args.scene)
    reference = load_reference(base, scene)
    out_dir = base.output_dir
    if reference is None:
        ref_cfg = base.model_copy(update={"guider": GuiderKind.UNIFORM, "iterations": args.reference_iterations})
        logger.info(f"No reference given; rendering a {args.reference_iterations}-iteration uniform reference")
        ref_run = run(scene, ref_cfg)
        reference = ref_run.framebuffer.caustics
        out_dir.mkdir(parents=True, exist_ok=True)
        write_pfm(out_dir / f"{scene.name}_reference.pfm", reference)

    finals = []
    for name in [g.strip() for g in args.guiders.split(",") if g.strip()]:
        cfg = load_config(**{**base.model_dump(), "guider": name})
        result = run(scene, cfg, reference=reference)
        write_outputs(scene, cfg, result, out_dir, f"{scene.name}_{cfg.guider.value}")
        last = result.rows[-1]
        finals.append((cfg.guider.value, last.mse, last.ssim_comp, last.gathered))

    print(f"{'guider':<10}{'mse':>14}{'1-ssim':>12}{'gathered':>12}")
    for g, m, s, n in sorted(finals, key=lambda r: r[1]):
        print(f"{g:<10}{m:>14.6g}{s:>12.6g}{n:>12d}")
    return 0


@timing_decorator
def cmd_viz(args: argparse.Namespace) -> int:
    config = config_from_args(args, guider=GuiderKind.G3D, seed=args.seed)
    scene = load_scene(args.scene)
    guider = GaussianGuider(config)
    result = run(scene, config, guider=guider)
    out_dir = config.output_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    lights = [args.light] if args.light is not None else range(len(scene.lights))
    observer = np.array(args.observer, dtype=np.float64) if args.observer else None
    for lid in lights:
        mixture = guider.mixture(lid)
        if mixture is None:
            logger.warning(f"Light {lid} has no fitted mixture")
            continue
        info = viz_distribution(scene, lid, mixture, out_dir / f"{scene.name}_light{lid}", observer=observer)
        print(f"light {lid}: {info['directional']} {info['spatial']} integral={info['integral']:.4f}")
    write_ppm(out_dir / f"{scene.name}_radius.ppm", radius_heatmap(result.framebuffer.radius, max_radius_for(scene, config)))
    return 0


@timing_decorator
def cmd_test_dist(args: argparse.Namespace) -> int:
    results = run_diagnostics(seed=args.seed, samples=args.samples)
    for r in results:
        print(r.line())
    failed = sum(not r.passed for r in results)
    print(f"\n📊 Results: {len(results) - failed} passed, {failed} failed")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="caustica", description="Photon guiding renderer for caustics")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("render", help="render one scene with one guider")
    add_config_flags(p)
    p.add_argument("--guider", choices=_choices(GuiderKind))
    p.add_argument("--seed", type=int)
    p.add_argument("--name", help="output file stem")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("compare", help="render with several guiders against one reference")
    add_config_flags(p)
    p.add_argument("--guiders", default=DEFAULT_COMPARE)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--reference-iterations", type=int, default=256)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("viz", help="render with the Gaussian guider and visualize the fitted mixtures")
    add_config_flags(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--light", type=int)
    p.add_argument("--observer", type=float, nargs=3, metavar=("X", "Y", "Z"))
    p.set_defaults(func=cmd_viz)

    p = sub.add_parser("test-dist", help="normalization, closed-form and chi-square diagnostics")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=1_000_000)
    p.set_defaults(func=cmd_test_dist)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    code, error = safe_call(args.func, args)
    if error is not None:
        print(f"error [{error.code}]: {error.message}", file=sys.stderr)
        return exit_code_for(error)
    return code


if __name__ == "__main__":
    sys.exit(main())
