"""Command-line entry point.

Every verb reads the pipeline config (``--config FILE`` plus ``BLOCKFORGE_*``
environment overrides) and operates on the workspace named by
``artifact_dir``.  Exit codes: 0 on success, 1 on domain errors (missing
artifacts, invalid inputs, diverged training), 2 on usage errors.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .artifacts import ArtifactError
from .config import (
    PipelineConfig,
    apply_env_overrides,
    config_from_dict,
    config_to_json,
    load_config,
)
from .latent_diffusion import LayoutDocument
from .mesh_geometry import parse_block_id
from .pipeline import (
    Workspace,
    assemble_scene,
    evaluate_meshes,
    expand_scene,
    fit_triplanes,
    generate_data,
    sample_meshes,
    train_autoencoder,
    train_generator,
)


def _load_cfg(args: argparse.Namespace) -> PipelineConfig:
    if args.config:
        return load_config(args.config)  # applies BLOCKFORGE_* overrides itself
    return config_from_dict(apply_env_overrides({}, os.environ))


def _cmd_gen_data(args: argparse.Namespace) -> int:
    cfg = _load_cfg(args)
    ws = Workspace(cfg.artifact_dir)
    ws.root.mkdir(parents=True, exist_ok=True)
    (ws.root / "config.resolved.json").write_text(config_to_json(cfg))
    index = generate_data(cfg)
    empty = sum(1 for row in index["blocks"] if row["empty"])
    print(f"wrote {len(index['blocks'])} blocks ({empty} empty) to {ws.root / 'data'}")
    return 0


def _cmd_fit(args: argparse.Namespace) -> int:
    cfg = _load_cfg(args)
    report = fit_triplanes(cfg)
    print(f"fitted {report['fitted']} of {report['total']} blocks")
    return 0


def _cmd_train_vae(args: argparse.Namespace) -> int:
    cfg = _load_cfg(args)
    report = train_autoencoder(cfg)
    print(f"trained on {report['examples']} blocks, final loss {report['final_loss']:.4f}")
    return 0


def _cmd_train_diff(args: argparse.Namespace) -> int:
    cfg = _load_cfg(args)
    report = train_generator(cfg, conditional=args.layout)
    kind = "layout-conditioned" if args.layout else "unconditional"
    print(f"trained {kind} denoiser on {report['latents']} latents, "
          f"final loss {report['final_loss']:.4f}")
    return 0


def _read_layout(path: str | None) -> LayoutDocument | None:
    if path is None:
        return None
    return LayoutDocument.from_json(Path(path).read_text())


def _cmd_sample(args: argparse.Namespace) -> int:
    cfg = _load_cfg(args)
    paths = sample_meshes(
        cfg, args.n, args.seed,
        layout_doc=_read_layout(args.layout),
        out_dir=args.out,
    )
    for path in paths:
        print(path)
    return 0


def _cmd_expand(args: argparse.Namespace) -> int:
    cfg = _load_cfg(args)
    result = expand_scene(
        cfg, args.scene, parse_block_id(args.to), args.seed,
        layout_doc=_read_layout(args.layout),
    )
    print(f"expanded block {result['block']} (revision {result['revision']})")
    for seam in result["seams"]:
        rms = "n/a" if seam["rms"] is None else f"{seam['rms']:.5f}"
        mark = "ok" if seam["passed"] else "OVER THRESHOLD"
        print(f"  seam vs {seam['neighbor']}: rms {rms} ({mark})")
    return 0


def _cmd_build(args: argparse.Namespace) -> int:
    cfg = _load_cfg(args)
    extent = tuple(float(v) for v in args.scene_extent.split(","))
    if len(extent) != 3:
        raise ValueError(f"--scene-extent needs X,Y,Z, got {args.scene_extent!r}")
    path = assemble_scene(cfg, extent, args.name, args.seed, layouts_dir=args.layouts)
    manifest = json.loads(Path(path).read_text())
    n_blocks = len(manifest["grid"]["blocks"])
    print(f"built scene {args.name!r}: {n_blocks} blocks, {len(manifest['seams'])} seams checked")
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    report = evaluate_meshes(args.pred, args.ref)
    print(report.table())
    if args.out:
        Path(args.out).write_text(report.to_json())
        print(f"wrote {args.out}")
    return 0


def _cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    from .pipeline import SceneStore, load_models
    from .service import SceneSession, create_app

    host, _, port = args.addr.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"--addr needs HOST:PORT, got {args.addr!r}")
    cfg = _load_cfg(args)
    scene = Path(args.scene)
    store = SceneStore.open(scene.parent if scene.is_file() else scene)
    models = load_models(cfg, store.conditional)
    session = SceneSession(store, models, workers=cfg.workers, queue_limit=args.queue_limit)
    app = create_app(session)
    uvicorn.run(app, host=host, port=int(port), log_level="warning")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="blockforge",
        description="Block-based scene generation: data, training, sampling, assembly.",
    )
    sub = parser.add_subparsers(dest="verb", required=True)

    def verb(name: str, fn, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="pipeline config JSON (default: built-in values)")
        p.set_defaults(fn=fn)
        return p

    verb("gen-data", _cmd_gen_data, "generate the synthetic block corpus")
    verb("fit", _cmd_fit, "fit tri-planes (joint decoder phase, then the fleet)")
    verb("train-vae", _cmd_train_vae, "train the latent autoencoder")

    p = verb("train-diff", _cmd_train_diff, "train the latent denoiser")
    p.add_argument("--layout", action="store_true", help="condition on layout maps")

    p = verb("sample", _cmd_sample, "sample block meshes from the trained model")
    p.add_argument("--n", type=int, required=True, help="number of samples")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--layout", help="layout document JSON to condition on")
    p.add_argument("--out", help="output directory (default: <artifacts>/samples)")

    p = verb("expand", _cmd_expand, "extrapolate one block into an existing scene")
    p.add_argument("--scene", required=True, help="scene manifest path")
    p.add_argument("--to", required=True, help="target block index I,J,K")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--layout", help="layout document JSON for the new block")

    p = verb("build", _cmd_build, "plan and build a full scene")
    p.add_argument("--scene-extent", required=True, help="scene size X,Y,Z in world units")
    p.add_argument("--name", required=True, help="scene name under <artifacts>/scenes/")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--layouts", help="directory of per-block layout JSONs (conditioned build)")

    p = verb("eval", _cmd_eval, "compare generated meshes against references")
    p.add_argument("--pred", required=True, help="directory or file of predicted .obj meshes")
    p.add_argument("--ref", required=True, help="directory or file of reference .obj meshes")
    p.add_argument("--out", help="write the metric report JSON here")

    p = verb("serve", _cmd_serve, "serve a scene over HTTP for interactive editing")
    p.add_argument("--scene", required=True, help="scene directory or manifest path")
    p.add_argument("--addr", default="127.0.0.1:8000", help="bind address HOST:PORT")
    p.add_argument("--queue-limit", type=int, default=8, help="max queued expand jobs")

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except KeyError as exc:
        print(f"error: unknown block {exc}", file=sys.stderr)
        return 1
    except (ValueError, ArtifactError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
