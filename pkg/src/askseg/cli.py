"""Command-line entry points for training, map construction, phantom data,
simulated sessions, and serving the interactive API.

Every command writes its fully resolved configuration (defaults merged with
overrides, seed included) to <out>/config.json so runs are reproducible from
the output directory alone.
"""

from __future__ import annotations

import glob
import json
import sys
from pathlib import Path

import click
import numpy as np

from . import phantom, probmap, session, shapemodel
from .posterior import BetaConfig
from .sampler import SamplerConfig
from .volume import BinaryMask, ScalarField3D, dice, load_mhd, save_mhd


def _echo_config(out_dir: Path, command: str, config: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {"command": command, **config}
    (out_dir / "config.json").write_text(json.dumps(doc, indent=2, default=str))


def _load_mask(path: str) -> BinaryMask:
    fld = load_mhd(path)
    if not isinstance(fld, BinaryMask):
        raise click.ClickException(f"{path} is not a MET_UCHAR mask volume")
    return fld


def _load_map(path: str) -> probmap.ProbabilityMap:
    fld = load_mhd(path)
    if isinstance(fld, BinaryMask):
        raise click.ClickException(f"{path} is a mask, not a probability map")
    return probmap.clamp_probabilities(fld)


def _sampler_config(kwargs: dict) -> SamplerConfig:
    return SamplerConfig(
        burn_in=kwargs["burn_in"],
        thin=kwargs["thin"],
        n_samples=kwargs["n_samples"],
        std_scale=kwargs["std_scale"],
        std_translation=kwargs["std_translation"],
        std_rotation=kwargs["std_rotation"],
        std_mode=kwargs["std_mode"],
        scale_bounds=(kwargs["scale_min"], kwargs["scale_max"]),
        rng_seed=kwargs["seed"],
    )


def sampler_options(fn):
    for name, default, help_text in reversed(
        [
            ("--burn-in", 100, "discarded leading chain steps"),
            ("--thin", 25, "steps between retained samples"),
            ("--n-samples", 15, "candidate segmentations per question"),
            ("--std-scale", 0.02, "proposal std of the size parameter"),
            ("--std-translation", 0.3, "proposal std in voxels"),
            ("--std-rotation", 0.02, "proposal std in radians"),
            ("--std-mode", 0.1, "proposal std in units of sqrt(eigenvalue)"),
            ("--scale-min", 0.6, "lower clamp of the size parameter"),
            ("--scale-max", 1.3, "upper clamp of the size parameter"),
        ]
    ):
        fn = click.option(name, default=default, show_default=True, help=help_text)(fn)
    return fn


@click.group()
def main() -> None:
    """Interactive 3D segmentation from yes/no voxel questions."""


@main.command("train-shape")
@click.option("--masks", required=True, help="glob of training mask .mhd files")
@click.option("--modes", "n_modes", default=3, show_default=True, help="eigenmodes to retain")
@click.option("--out", "out_dir", required=True, type=click.Path(path_type=Path))
@click.option("--seed", default=0, show_default=True, help="unused; echoed for uniformity")
def cmd_train_shape(masks: str, n_modes: int, out_dir: Path, seed: int) -> None:
    """Fit the shape prior from segmentation masks."""
    paths = sorted(glob.glob(masks))
    if not paths:
        raise click.ClickException(f"no files match {masks!r}")
    if n_modes < 1:
        raise click.ClickException("--modes must be >= 1")
    loaded = [_load_mask(p) for p in paths]
    try:
        model = shapemodel.train(loaded, n=n_modes)
    except ValueError as exc:
        raise click.ClickException(str(exc)) from exc
    shapemodel.save_model(model, out_dir)
    _echo_config(out_dir, "train-shape", {"masks": paths, "modes": n_modes, "seed": seed})
    click.echo(f"model with {model.n} modes written to {out_dir}")


@main.command("train-probmap")
@click.option("--volumes", required=True, help="glob of intensity .mhd files")
@click.option("--masks", required=True, help="glob of matching mask .mhd files")
@click.option("--rounds", default=50, show_default=True)
@click.option("--features", "n_features", default=256, show_default=True)
@click.option("--samples-per-class", default=500, show_default=True)
@click.option("--patch-radius", default=4, show_default=True)
@click.option("--sigmoid-scale", default=1.0, show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path(path_type=Path))
@click.option("--seed", default=0, show_default=True)
def cmd_train_probmap(
    volumes: str,
    masks: str,
    rounds: int,
    n_features: int,
    samples_per_class: int,
    patch_radius: int,
    sigmoid_scale: float,
    out_dir: Path,
    seed: int,
) -> None:
    """Train the boosted voxel classifier behind the probability map."""
    vol_paths = sorted(glob.glob(volumes))
    mask_paths = sorted(glob.glob(masks))
    if not vol_paths or len(vol_paths) != len(mask_paths):
        raise click.ClickException("volume and mask globs must match one to one")
    rng = np.random.default_rng(seed)
    feats = probmap.random_haar_features(n_features, rng, patch_radius=patch_radius)

    vols: dict[str, ScalarField3D] = {}
    samples = []
    for vp, mp in zip(vol_paths, mask_paths):
        vol = load_mhd(vp)
        mask = _load_mask(mp)
        vols[vp] = vol
        inside = np.argwhere(mask.data > 0)
        outside = np.argwhere(mask.data == 0)
        for pool, label in ((inside, 1), (outside, 0)):
            take = min(samples_per_class, len(pool))
            idx = rng.choice(len(pool), size=take, replace=False)
            samples.extend((tuple(int(c) for c in pool[i]), label, vp) for i in idx)

    try:
        model = probmap.train_adaboost(feats, samples, vols, rounds=rounds)
    except ValueError as exc:
        raise click.ClickException(str(exc)) from exc
    model.sigmoid_scale = sigmoid_scale
    out_dir.mkdir(parents=True, exist_ok=True)
    probmap.save_boosted(model, out_dir / "boosted.json")
    _echo_config(
        out_dir,
        "train-probmap",
        {
            "volumes": vol_paths,
            "masks": mask_paths,
            "rounds": rounds,
            "features": n_features,
            "samples_per_class": samples_per_class,
            "patch_radius": patch_radius,
            "sigmoid_scale": sigmoid_scale,
            "seed": seed,
        },
    )
    click.echo(f"boosted model with {len(model.stumps)} stumps written to {out_dir}")


@main.command("predict-probmap")
@click.option("--model", "model_path", required=True, type=click.Path(exists=True))
@click.option("--volume", "volume_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path(path_type=Path))
@click.option("--seed", default=0, show_default=True, help="unused; echoed for uniformity")
def cmd_predict_probmap(model_path: str, volume_path: str, out_dir: Path, seed: int) -> None:
    """Predict a probability map for one volume."""
    model = probmap.load_boosted(model_path)
    vol = load_mhd(volume_path)
    pmap = probmap.predict_map(model, vol)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_mhd(pmap, out_dir / "probmap.mhd")
    _echo_config(
        out_dir, "predict-probmap", {"model": model_path, "volume": volume_path, "seed": seed}
    )
    click.echo(f"map written to {out_dir / 'probmap.mhd'}")


@main.command("synthetic-map")
@click.option("--gt", "gt_path", required=True, type=click.Path(exists=True))
@click.option("--mode", type=click.Choice(["blurred", "translated"]), default="blurred", show_default=True)
@click.option("--sigma", default=1.5, show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path(path_type=Path))
@click.option("--seed", default=0, show_default=True, help="unused; echoed for uniformity")
def cmd_synthetic_map(gt_path: str, mode: str, sigma: float, out_dir: Path, seed: int) -> None:
    """Build a synthetic probability map from a ground-truth mask."""
    gt = _load_mask(gt_path)
    try:
        if mode == "blurred":
            pmap = probmap.synthetic_blurred(gt, sigma)
        else:
            pmap = probmap.synthetic_translated(gt, sigma)
    except ValueError as exc:
        raise click.ClickException(str(exc)) from exc
    out_dir.mkdir(parents=True, exist_ok=True)
    save_mhd(pmap, out_dir / "probmap.mhd")
    sidecar = {"mode": mode, "sigma": sigma, **pmap.meta}
    (out_dir / "probmap.json").write_text(json.dumps(sidecar, indent=2))
    _echo_config(out_dir, "synthetic-map", {"gt": gt_path, "mode": mode, "sigma": sigma, "seed": seed})
    click.echo(f"map written to {out_dir / 'probmap.mhd'}")


@main.command("phantom")
@click.option("--kind", type=click.Choice(["blob"]), default="blob", show_default=True)
@click.option("--dims", default="64,64,64", show_default=True, help="H,W,D")
@click.option("--count", default=10, show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path(path_type=Path))
@click.option("--seed", default=0, show_default=True)
@click.option("--rel-radius", default="0.12,0.15", show_default=True, help="semi-axis range / axis length")
@click.option("--bump-amplitude", default=0.015, show_default=True)
def cmd_phantom(
    kind: str, dims: str, count: int, out_dir: Path, seed: int, rel_radius: str, bump_amplitude: float
) -> None:
    """Generate phantom mask/volume pairs."""
    dim_tuple = tuple(int(v) for v in dims.split(","))
    if len(dim_tuple) != 3:
        raise click.ClickException("--dims must be H,W,D")
    lo, hi = (float(v) for v in rel_radius.split(","))
    cfg = phantom.PhantomConfig(rel_radius=(lo, hi), bump_amplitude=bump_amplitude)
    pairs = phantom.make_family(dim_tuple, count, seed, cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, (mask, vol) in enumerate(pairs):
        save_mhd(mask, out_dir / f"phantom_{i:03d}_mask.mhd")
        save_mhd(vol, out_dir / f"phantom_{i:03d}_vol.mhd")
    _echo_config(
        out_dir,
        "phantom",
        {
            "kind": kind,
            "dims": list(dim_tuple),
            "count": count,
            "seed": seed,
            "rel_radius": [lo, hi],
            "bump_amplitude": bump_amplitude,
        },
    )
    click.echo(f"{count} phantoms written to {out_dir}")


@main.command("simulate")
@click.option("--config", "config_path", type=click.Path(exists=True), help="JSON config file")
@click.option("--gt", "gt_path", type=click.Path(exists=True), help="ground-truth mask .mhd")
@click.option("--map", "map_path", type=click.Path(exists=True), help="probability map .mhd")
@click.option("--map-mode", type=click.Choice(["file", "blurred", "translated"]), default=None)
@click.option("--map-sigma", default=None, type=float)
@click.option("--model-dir", "model_dir", type=click.Path(exists=True))
@click.option("--k", "question_budget", default=None, type=int, help="question budget")
@click.option("--beta0", default=None, type=float)
@click.option("--mu-lr", default=None, type=float, help="beta learning rate")
@click.option("--beta-max", default=None, type=float)
@click.option("--beta-fixed", default=None, type=float, help="freeze beta (disables adaptation)")
@click.option("--baseline", "baselines", multiple=True, type=click.Choice(["thresholded", "random"]))
@click.option("--out", "out_dir", type=click.Path(path_type=Path), default=None)
@click.option("--seed", default=None, type=int)
@sampler_options
def cmd_simulate(config_path, **kwargs) -> None:
    """Run a simulated (oracle-answered) session and write the report."""
    cfg: dict = {
        "gt": None,
        "map": None,
        "map_mode": "file",
        "map_sigma": 1.5,
        "model_dir": None,
        "k": 30,
        "beta0": 1.0,
        "mu_lr": 3.0,
        "beta_max": 4.0,
        "beta_fixed": None,
        "baselines": ["thresholded"],
        "out": "simulate-out",
        "seed": 0,
        "burn_in": 100,
        "thin": 25,
        "n_samples": 15,
        "std_scale": 0.02,
        "std_translation": 0.3,
        "std_rotation": 0.02,
        "std_mode": 0.1,
        "scale_min": 0.6,
        "scale_max": 1.3,
    }
    if config_path:
        cfg.update(json.loads(Path(config_path).read_text()))
    overrides = {
        "gt": kwargs["gt_path"],
        "map": kwargs["map_path"],
        "map_mode": kwargs["map_mode"],
        "map_sigma": kwargs["map_sigma"],
        "model_dir": kwargs["model_dir"],
        "k": kwargs["question_budget"],
        "beta0": kwargs["beta0"],
        "mu_lr": kwargs["mu_lr"],
        "beta_max": kwargs["beta_max"],
        "beta_fixed": kwargs["beta_fixed"],
        "out": kwargs["out_dir"],
        "seed": kwargs["seed"],
    }
    cfg.update({k: v for k, v in overrides.items() if v is not None})
    if kwargs["baselines"]:
        cfg["baselines"] = list(kwargs["baselines"])
    for name in ("burn_in", "thin", "n_samples", "std_scale", "std_translation",
                 "std_rotation", "std_mode", "scale_min", "scale_max"):
        flag_default = {"burn_in": 100, "thin": 25, "n_samples": 15, "std_scale": 0.02,
                        "std_translation": 0.3, "std_rotation": 0.02, "std_mode": 0.1,
                        "scale_min": 0.6, "scale_max": 1.3}[name]
        if kwargs[name] != flag_default:
            cfg[name] = kwargs[name]

    if not cfg["gt"] or not cfg["model_dir"]:
        raise click.ClickException("--gt and --model-dir are required (flag or config)")

    gt = _load_mask(cfg["gt"])
    model = shapemodel.load_model(cfg["model_dir"])
    if cfg["map_mode"] == "blurred":
        pmap = probmap.synthetic_blurred(gt, cfg["map_sigma"])
    elif cfg["map_mode"] == "translated":
        pmap = probmap.synthetic_translated(gt, cfg["map_sigma"])
    else:
        if not cfg["map"]:
            raise click.ClickException("--map required when map-mode is 'file'")
        pmap = _load_map(cfg["map"])

    sampler_cfg = _sampler_config({**cfg, "seed": cfg["seed"]})
    if cfg["beta_fixed"] is not None:
        beta_cfg = BetaConfig(
            beta0=cfg["beta_fixed"],
            learning_rate=0.0,
            beta_max=max(cfg["beta_max"], cfg["beta_fixed"]),
        )
        adapt = False
    else:
        beta_cfg = BetaConfig(cfg["beta0"], cfg["mu_lr"], cfg["beta_max"])
        adapt = True

    report = session.run_simulation(
        gt,
        pmap,
        model,
        cfg["k"],
        sampler_cfg=sampler_cfg,
        beta_cfg=beta_cfg,
        rng_seed=cfg["seed"],
        adapt_beta=adapt,
        with_thresholded_baseline="thresholded" in cfg["baselines"],
        with_random_baseline="random" in cfg["baselines"],
    )

    out_dir = Path(cfg["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(json.dumps(report, indent=2))
    # rebuild the final mask from the reported state for the artifact
    from .shapemodel import ShapeState, synthesize_field, to_mask

    st = report["final"]["state"]
    state = ShapeState(st["scale"], tuple(st["translation"]), tuple(st["rotation"]), tuple(st["coeffs"]))
    final_mask = to_mask(synthesize_field(model, state, gt.dims))
    save_mhd(final_mask, out_dir / "final_mask.mhd")
    _echo_config(out_dir, "simulate", cfg)
    click.echo(
        f"final DSC {report['final']['dsc']:.4f} after {report['final']['n_questions']} questions; "
        f"report in {out_dir / 'report.json'}"
    )


@main.command("serve")
@click.option("--port", default=8008, show_default=True)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--data", "data_dir", type=click.Path(exists=True), help="directory of .mhd volumes/maps and model dirs")
@click.option("--demo", is_flag=True, help="build an in-memory phantom demo dataset")
@click.option("--demo-dims", default="48,48,48", show_default=True)
@click.option("--ui", "ui_dir", type=click.Path(exists=True), default=None, help="static frontend directory")
@click.option("--seed", default=0, show_default=True)
def cmd_serve(port, host, data_dir, demo, demo_dims, ui_dir, seed) -> None:
    """Serve the interactive session API (and optionally the web UI)."""
    import uvicorn

    from .service import build_demo_registry, build_registry_from_dir, create_app

    if demo:
        dims = tuple(int(v) for v in demo_dims.split(","))
        registry = build_demo_registry(dims=dims, seed=seed)
    elif data_dir:
        registry = build_registry_from_dir(data_dir)
    else:
        raise click.ClickException("need --demo or --data")

    app = create_app(registry, ui_dir=ui_dir)
    try:
        uvicorn.run(app, host=host, port=port, log_level="warning")
    except SystemExit as exc:  # uvicorn wraps bind errors
        raise click.ClickException(f"could not serve on {host}:{port}") from exc


if __name__ == "__main__":
    sys.exit(main())
