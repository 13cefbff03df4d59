#!/usr/local/bin/python3
import functools
import json
import logging
from enum import Enum
from pathlib import Path
from typing import List, Optional

import typer
from pydantic import ValidationError

from causal_fuzz.baselines import run_baselines
from causal_fuzz.data import Dataset, build_dataset, load_csv, save_csv
from causal_fuzz.errors import EXIT_LEAK, EXIT_RUNTIME, EXIT_USAGE, RUNTIME_ERRORS, USAGE_ERRORS
from causal_fuzz.estimator import ContrastPolicy, FuzzConfig, SubgroupPredicate
from causal_fuzz.fuzz import run_causal_fuzz
from causal_fuzz.generators import gen_failure_mode, save_truth
from causal_fuzz.graph import CausalGraph, load_graph
from causal_fuzz.predictor import Predictor, load_model, save_model, train_builtin
from causal_fuzz.remote import connect_remote, serve_predictor
from causal_fuzz.report import diff as diff_reports
from causal_fuzz.report import load_report, render
from causal_fuzz.scm import fit_sem, load_sem
from causal_fuzz.unlearn import unlearn_feature_removal

logger = logging.getLogger(__name__)

app = typer.Typer()

MODEL_URL_ENV = "CAUSAL_FUZZ_MODEL_URL"


class Family(Enum):
    proxy = "proxy"
    cancellation = "cancellation"
    subgroup = "subgroup"
    heart = "heart"


class ScoreKind(Enum):
    probability = "probability"
    raw = "raw"


class Contrast(Enum):
    flip = "flip"
    marginal = "marginal"
    fixed_delta = "fixed-delta"


class Format(Enum):
    json = "json"
    text = "text"


def exits_on_error(command):
    """Maps library errors onto the CLI exit codes."""

    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except typer.Exit:
            raise
        except USAGE_ERRORS as e:
            typer.secho(f"ERROR! {e}", fg="red", err=True)
            raise typer.Exit(EXIT_USAGE)
        except ValidationError as e:
            typer.secho(f"ERROR! {e.errors()[0]['msg']}", fg="red", err=True)
            raise typer.Exit(EXIT_USAGE)
        except RUNTIME_ERRORS as e:
            typer.secho(f"ERROR! {e}", fg="red", err=True)
            raise typer.Exit(EXIT_RUNTIME)
        except OSError as e:
            typer.secho(f"ERROR! {e}", fg="red", err=True)
            raise typer.Exit(EXIT_RUNTIME)
        except Exception as e:
            # exit 1 means a leak, so nothing else may surface with it
            logger.exception("unexpected failure")
            typer.secho(f"ERROR! unexpected {type(e).__name__}: {e}", fg="red", err=True)
            raise typer.Exit(EXIT_RUNTIME)

    return wrapper


@app.callback()
def main(verbose: bool = typer.Option(False, "--verbose", "-v")):
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def _read_data(path: Path, graph: Optional[CausalGraph] = None) -> Dataset:
    data = load_csv(path)
    if graph is None:
        return data
    kinds = {c: (graph.kind(c) if c in graph.names else data.kinds[c]) for c in data.columns}
    return build_dataset(data.columns, kinds, data.values)


def _open_model(model: str) -> Predictor:
    if model.startswith(("http://", "https://")):
        return connect_remote(model)
    return load_model(model)


def _split_names(text: Optional[str]) -> Optional[List[str]]:
    if text is None:
        return None
    return [name.strip() for name in text.split(",") if name.strip()]


def _sibling(out: Path, suffix: str) -> Path:
    return out.with_name(out.stem + suffix)


@app.command()
@exits_on_error
def gen_data(
    family: Family = typer.Option(...),
    n: int = 20000,
    seed: int = 0,
    strength: float = 1.0,
    out: Path = typer.Option(...),
):
    mode = gen_failure_mode(family.value, n, seed, strength)
    save_csv(mode.data, out)
    _sibling(out, ".graph.json").write_text(mode.graph.json(indent=2) + "\n", encoding="utf-8")
    _sibling(out, ".sem.json").write_text(mode.sem.json(indent=2) + "\n", encoding="utf-8")
    save_truth(mode.truth, _sibling(out, ".truth.csv"))
    typer.secho(f"wrote {out} ({mode.data.n_rows} rows) with graph, sem and truth files", fg="green")


@app.command("fit-sem")
@exits_on_error
def fit_sem_cmd(
    graph: Path = typer.Option(..., exists=True, readable=True),
    data: Path = typer.Option(..., exists=True, readable=True),
    out: Path = typer.Option(...),
):
    causal_graph = load_graph(graph)
    sem = fit_sem(causal_graph, _read_data(data, causal_graph))
    out.write_text(sem.json(indent=2) + "\n", encoding="utf-8")
    for node, score in sem.diagnostics.items():
        typer.echo(f"{node}: {score:.4f}")
    typer.secho(f"wrote {out}", fg="green")


@app.command()
@exits_on_error
def train(
    data: Path = typer.Option(..., exists=True, readable=True),
    outcome: str = typer.Option(...),
    features: Optional[str] = typer.Option(None, help="comma-separated; defaults to every other column"),
    seed: int = 0,
    out: Path = typer.Option(...),
):
    dataset = _read_data(data)
    names = _split_names(features) or [c for c in dataset.columns if c != outcome]
    predictor = train_builtin(dataset, outcome, names, seed=seed)
    save_model(predictor, out)
    typer.secho(f"wrote {out} ({predictor.model_id})", fg="green")


@app.command()
@exits_on_error
def unlearn(
    data: Path = typer.Option(..., exists=True, readable=True),
    target: str = typer.Option(...),
    outcome: str = typer.Option(...),
    seed: int = 0,
    out: Path = typer.Option(...),
):
    predictor = unlearn_feature_removal(_read_data(data), target, outcome, seed=seed)
    save_model(predictor, out)
    typer.secho(f"wrote {out} without {target} ({predictor.model_id})", fg="green")


@app.command()
@exits_on_error
def fuzz(
    graph: Path = typer.Option(..., exists=True, readable=True),
    sem: Path = typer.Option(..., exists=True, readable=True),
    model: str = typer.Option(..., envvar=MODEL_URL_ENV, help="model file or http(s) URL"),
    data: Path = typer.Option(..., exists=True, readable=True, help="reference rows"),
    target: str = typer.Option(...),
    outcome: Optional[str] = typer.Option(None, help="label column, used by --with-baselines"),
    budget: int = 10000,
    threshold: float = 0.05,
    k: int = 3,
    max_length: int = 4,
    score_kind: ScoreKind = ScoreKind.probability,
    contrast: Optional[Contrast] = None,
    delta: float = 1.0,
    seed: int = 0,
    subgroup: Optional[List[str]] = typer.Option(None, help="repeatable, e.g. age<40"),
    block: Optional[List[str]] = typer.Option(None, help="repeatable comma-separated mediator set"),
    with_baselines: bool = False,
    report: Optional[Path] = None,
    format: Format = Format.json,
):
    causal_graph = load_graph(graph)
    config = FuzzConfig.create(
        graph=causal_graph,
        sem=load_sem(sem),
        predictor=_open_model(model),
        data=_read_data(data, causal_graph),
        target=target,
        threshold=threshold,
        budget=budget,
        k=k,
        max_length=max_length,
        contrast=None if contrast is None else ContrastPolicy(mode=contrast.value, delta=delta),
        score_kind=score_kind.value,
        subgroups=[SubgroupPredicate.parse(text) for text in subgroup or []],
        blocked=[_split_names(text) for text in block or []],
        seed=seed,
    )
    result = run_causal_fuzz(config, with_baselines=with_baselines, outcome=outcome)
    document = render(result, format.value)
    if report is None:
        typer.echo(document, nl=False)
    else:
        report.write_text(document, encoding="utf-8")
    logger.info("seed=%d budget_used=%d report=%s", seed, result.header.budget_used, report or "<stdout>")

    if result.overall == "leak":
        typer.secho(f"LEAK: {len(result.leaks)} leaking entries", fg="yellow", err=True)
        raise typer.Exit(EXIT_LEAK)
    typer.secho(f"{result.overall}", fg="green", err=True)


@app.command()
@exits_on_error
def baselines(
    model: str = typer.Option(..., envvar=MODEL_URL_ENV),
    data: Path = typer.Option(..., exists=True, readable=True),
    target: str = typer.Option(...),
    outcome: Optional[str] = None,
    group: Optional[str] = None,
    seed: int = 0,
):
    summary = run_baselines(_open_model(model), _read_data(data), target, outcome=outcome, group=group, seed=seed)
    typer.echo(json.dumps(summary, indent=2))


@app.command()
@exits_on_error
def diff(
    old: Path = typer.Option(..., exists=True, readable=True),
    new: Path = typer.Option(..., exists=True, readable=True),
):
    result = diff_reports(load_report(old), load_report(new))
    typer.echo(result.render(), nl=False)
    if result.failing:
        raise typer.Exit(EXIT_LEAK)


@app.command()
@exits_on_error
def serve(
    model: Path = typer.Option(..., exists=True, readable=True),
    host: str = "127.0.0.1",
    port: int = 8000,
):
    server = serve_predictor(load_model(model), host, port)
    typer.secho(f"serving on http://{host}:{server.server_address[1]}", fg="green")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()


if __name__ == "__main__":
    app()
