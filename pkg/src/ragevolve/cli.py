"""Command-line interface: ingest, annotate, sample, evolve, answer, evaluate,
analyze, and library maintenance."""

from __future__ import annotations

import csv
import json
import logging
import sys
from pathlib import Path

import click

from . import runtime
from .datasets import annotate as annotate_queries
from .datasets import ingest_dataset, load_queries, save_queries, stratified_sample
from .library import ExperienceLibrary
from .retrieval import ingest_corpus


def _engine(config_path: str) -> runtime.Engine:
    config = runtime.RunConfig.from_yaml(config_path)
    return runtime.Engine(config)


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Enable debug logging.")
def main(verbose: bool) -> None:
    """Evolve and run a multi-agent retrieval-augmented QA system."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )


@main.group()
def ingest() -> None:
    """Ingest corpora and benchmark datasets."""


@ingest.command("corpus")
@click.argument("path", type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path(), help="Where to persist the index.")
def ingest_corpus_cmd(path: str, out: str) -> None:
    """Build a lexical index from a JSONL corpus of {id, title, text}."""
    index = ingest_corpus(path)
    index.save(out)
    click.echo(f"indexed {index.count} passages -> {out}")


@ingest.command("dataset")
@click.argument("path", type=click.Path(exists=True))
@click.option("--kind", type=click.Choice(["qa", "claim"]), default="qa")
@click.option("--out", required=True, type=click.Path())
def ingest_dataset_cmd(path: str, kind: str, out: str) -> None:
    """Convert a benchmark JSONL file into the engine's query format."""
    schema_kind = "claim_verification" if kind == "claim" else "qa"
    queries = ingest_dataset(path, schema_kind)
    save_queries(queries, out)
    click.echo(f"ingested {len(queries)} queries -> {out}")


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--in", "in_path", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
def annotate(config_path: str, in_path: str, out: str) -> None:
    """Annotate queries with reasoning type and complexity via the backend."""
    engine = _engine(config_path)
    queries = load_queries(in_path)
    annotated = annotate_queries(queries, engine.orchestrator_backend)
    save_queries(annotated, out)
    click.echo(f"annotated {len(annotated)} queries -> {out}")


@main.command()
@click.option("--in", "in_path", required=True, type=click.Path(exists=True))
@click.option("--n", "n", required=True, type=int)
@click.option("--seed", default=0, type=int, show_default=True)
@click.option("--out", required=True, type=click.Path())
def sample(in_path: str, n: int, seed: int, out: str) -> None:
    """Stratified difficulty-aware sampling of a training set."""
    queries = load_queries(in_path)
    selected = stratified_sample(queries, n, seed)
    save_queries(selected, out)
    click.echo(f"sampled {len(selected)} of {len(queries)} queries -> {out}")


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--train", "train_path", required=True, type=click.Path(exists=True))
@click.option("--iterations", type=int, default=None, help="Override config iterations.")
@click.option("--seed", type=int, default=None, help="Override config seed.")
def evolve(config_path: str, train_path: str, iterations: int | None, seed: int | None) -> None:
    """Run the learning loop; resumes from persisted state in the workdir."""
    config = runtime.RunConfig.from_yaml(config_path)
    if iterations is not None or seed is not None:
        from dataclasses import replace

        config = replace(
            config,
            iterations=config.iterations if iterations is None else iterations,
            seed=config.seed if seed is None else seed,
        )
    engine = runtime.Engine(config)
    training = load_queries(train_path)
    summary = runtime.evolve(engine, training)
    click.echo(json.dumps(summary, indent=2))


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--ood", is_flag=True, help="Use the out-of-distribution eval temperature.")
@click.argument("question")
def answer(config_path: str, ood: bool, question: str) -> None:
    """Answer one question with the current library and prompts (no learning)."""
    engine = _engine(config_path)
    temperature = engine.config.ood_eval_temperature if ood else None
    result = runtime.answer(engine, question, temperature=temperature)
    click.echo(json.dumps(result, indent=2))


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--dataset", "dataset_path", required=True, type=click.Path(exists=True))
@click.option("--ood", is_flag=True)
@click.option("--out", required=True, type=click.Path(), help="Report directory.")
def evaluate(config_path: str, dataset_path: str, ood: bool, out: str) -> None:
    """Score the system on an ingested dataset; writes JSON and CSV reports."""
    engine = _engine(config_path)
    queries = load_queries(dataset_path)
    report, rows = runtime.evaluate(engine, queries, ood=ood)
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(json.dumps(report, indent=2), encoding="utf-8")
    with (out_dir / "per_query.csv").open("w", newline="", encoding="utf-8") as handle:
        writer = csv.DictWriter(
            handle,
            fieldnames=["query_id", "answer", "em", "f1", "accuracy", "tokens", "failed"],
        )
        writer.writeheader()
        writer.writerows(rows)
    click.echo(json.dumps(report, indent=2))


@main.command()
@click.option("--log", "log_path", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--window", default=50, show_default=True, type=int)
@click.option("--stride", default=10, show_default=True, type=int)
@click.option("--frac", default=0.3, show_default=True, type=float)
@click.option(
    "--conditional",
    is_flag=True,
    help="Use conditional (next-given-current) transition entropy.",
)
def analyze(log_path: str, out: str, window: int, stride: int, frac: float, conditional: bool) -> None:
    """Emit entropy.csv, metrics.csv, phases.json, tokens_lowess.csv from a run log."""
    paths = runtime.analyze(
        log_path, out, window=window, stride=stride, frac=frac, conditional=conditional
    )
    click.echo(json.dumps(paths, indent=2))


@main.group()
def library() -> None:
    """Inspect and maintain the experience library."""


def _load_library(config_path: str | None, library_path: str | None) -> tuple[ExperienceLibrary, Path]:
    if library_path:
        path = Path(library_path)
        thresholds = {}
    elif config_path:
        config = runtime.RunConfig.from_yaml(config_path)
        path = Path(config.workdir) / "library.json"
        thresholds = {
            "profile_jaccard": config.profile_jaccard,
            "diversity_threshold": config.diversity_threshold,
        }
    else:
        raise click.UsageError("provide --config or --path")
    if not path.exists():
        raise click.UsageError(f"no library at {path}")
    return ExperienceLibrary.load(path, **thresholds), path


@library.command("show")
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--path", "library_path", type=click.Path(exists=True))
def library_show(config_path: str | None, library_path: str | None) -> None:
    """Print active entries with utility statistics."""
    lib, _ = _load_library(config_path, library_path)
    for entry in lib.active_entries():
        click.echo(
            f"{entry.id} u={entry.utility:.2f} ({entry.successes}/{entry.uses}) "
            f"[{entry.profile}] {entry.insight}"
        )
    click.echo(f"-- {len(lib.active_entries())} active / {len(lib.entries)} total")


@library.command("compact")
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--path", "library_path", type=click.Path(exists=True))
def library_compact(config_path: str | None, library_path: str | None) -> None:
    """Apply duplicate folding and the size cap, then rewrite the file."""
    lib, path = _load_library(config_path, library_path)
    before = len(lib.active_entries())
    lib._dedup_actives()
    lib._enforce_cap()
    lib.save(path)
    click.echo(f"compacted: {before} -> {len(lib.active_entries())} active entries")


@library.command("export")
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--path", "library_path", type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
def library_export(config_path: str | None, library_path: str | None, out: str) -> None:
    """Write a copy of the library to another location."""
    lib, _ = _load_library(config_path, library_path)
    lib.save(out)
    click.echo(f"exported {len(lib.entries)} entries -> {out}")


if __name__ == "__main__":
    main(sys.argv[1:])
