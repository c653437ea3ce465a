"""Command-line entry point: ``bullseye validate|run|resume|summarize|sweep``."""

from __future__ import annotations

import itertools
import logging
import sys
from pathlib import Path

import click
import yaml

from bullseye.errors import BullseyeError, ManifestError
from bullseye.manifest import load_manifest

# flag name -> dotted manifest key
FLAG_KEYS = {
    "iterations": "attack.iterations",
    "attack_kind": "attack.kinds",
    "epsilon": "attack.epsilon",
    "k": "attack.k",
    "n_targets": "dataset.n_targets",
    "output_dir": "output_dir",
    "workers": "workers",
}


def _parse_set(items) -> dict:
    out = {}
    for item in items:
        if "=" not in item:
            raise click.BadParameter(f"expected key=value, got {item!r}", param_hint="--set")
        key, value = item.split("=", 1)
        out[key.strip()] = yaml.safe_load(value)
    return out


def _overrides(opts: dict) -> dict:
    out = {}
    for flag, key in FLAG_KEYS.items():
        value = opts.get(flag)
        if value is None or value == ():
            continue
        out[key] = list(value) if flag == "attack_kind" else value
    out.update(_parse_set(opts.get("set_") or ()))
    return out


def override_options(fn):
    for decorator in reversed([
        click.option("--iterations", type=int, help="Crafting iterations."),
        click.option("--attack-kind", multiple=True, type=click.Choice(["BP", "CP", "FC", "BP_FIXED"]),
                     help="Attack kind (repeatable)."),
        click.option("--epsilon", type=float, help="l-infinity budget."),
        click.option("--k", type=int, help="Number of poisons."),
        click.option("--n-targets", type=int, help="Number of targets."),
        click.option("--output-dir", type=click.Path(file_okay=False), help="Artifact directory."),
        click.option("--workers", type=int, help="Concurrent cells (default: $BULLSEYE_WORKERS or 1)."),
        click.option("--set", "set_", multiple=True, metavar="KEY=VALUE", help="Override any manifest key."),
    ]):
        fn = decorator(fn)
    return fn


def _load(path, opts):
    return load_manifest(path, _overrides(opts))


@click.group()
@click.option("-v", "--verbose", is_flag=True)
def main(verbose):
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(message)s")


@main.command()
@click.argument("manifest", type=click.Path(exists=True, dir_okay=False))
@override_options
def validate(manifest, **opts):
    """Check a manifest and print its hash."""
    m = _load(manifest, opts)
    click.echo(f"ok {m.experiment_id} {m.hash()}")


@main.command()
@click.argument("manifest", type=click.Path(exists=True, dir_okay=False))
@override_options
def run(manifest, **opts):
    """Run an experiment into a fresh output directory."""
    from bullseye.experiment import run_experiment

    out = run_experiment(_load(manifest, opts))
    click.echo((out / "summary.tsv").read_text(), nl=False)


@main.command()
@click.argument("output_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--workers", type=int)
def resume(output_dir, workers):
    """Finish an interrupted run, reusing crafted poisons."""
    from bullseye.experiment import run_experiment

    overrides = {"workers": workers} if workers else None
    m = load_manifest(Path(output_dir) / "manifest.yaml", overrides)
    out = run_experiment(m, output_dir, resume=True)
    click.echo((out / "summary.tsv").read_text(), nl=False)


@main.command()
@click.argument("output_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--allow-mixed", is_flag=True, help="Combine reports produced by different manifests.")
def summarize(output_dir, allow_mixed):
    """Rebuild summary.tsv and series/ from the reports."""
    from bullseye.summary import summarize as _summarize

    click.echo(_summarize(output_dir, allow_mixed).read_text(), nl=False)


@main.command()
@click.argument("manifest", type=click.Path(exists=True, dir_okay=False))
@click.option("--grid", multiple=True, required=True, metavar="KEY=V1,V2,...",
              help="Manifest key and comma-separated values (repeatable; the cross product is run).")
@override_options
def sweep(manifest, grid, **opts):
    """Run one experiment per point of a parameter grid, each in its own subdirectory."""
    from bullseye.experiment import run_experiment

    axes = []
    for item in grid:
        if "=" not in item:
            raise click.BadParameter(f"expected KEY=V1,V2, got {item!r}", param_hint="--grid")
        key, values = item.split("=", 1)
        axes.append([(key, yaml.safe_load(v)) for v in values.split(",")])
    base = _overrides(opts)
    root = Path(base.get("output_dir") or load_manifest(manifest).output_dir)
    for point in itertools.product(*axes):
        name = "_".join(f"{k.split('.')[-1]}={v}" for k, v in point)
        overrides = {**base, **dict(point), "output_dir": str(root / name)}
        m = load_manifest(manifest, overrides)
        run_experiment(m)
        click.echo(f"{name}\t{m.hash()}\t{root / name / 'summary.tsv'}")


def entry():
    try:
        main(standalone_mode=False)
    except ManifestError as exc:
        click.echo("invalid manifest:", err=True)
        for p in exc.problems:
            click.echo(f"  {p}", err=True)
        sys.exit(2)
    except BullseyeError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)
    except click.exceptions.Abort:
        sys.exit(130)
    except click.ClickException as exc:
        exc.show()
        sys.exit(exc.exit_code)


if __name__ == "__main__":
    entry()
