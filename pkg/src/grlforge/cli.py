"""Command line entry point: the whole pipeline as file-based subcommands.

Every subcommand loads one configuration file, merges any flags over it, and
writes the fully-resolved result to `config.txt` beside its outputs, so a run
directory always records exactly what produced it. Exit codes: 0 on success,
1 for user errors (bad flags, bad config, missing inputs), 2 when an internal
invariant breaks.
"""

import dataclasses
from pathlib import Path

import click
import numpy as np

from . import analysis, datasets, sweeps, synth, training
from .config import ExperimentConfig, read_config, write_config
from .network import load_model, predict_label, save_model
from .pipeline import SpectraSplit, fit_normalization, calibrate_fragile_gain, \
    domain_timeline, spectra_from_traces
from .spectrogram import row_center_hz

_SPLITS = ("train", "validation", "test")


def _load(config_path: str, output_dir: str | None) -> ExperimentConfig:
    cfg = read_config(config_path)
    if output_dir:
        cfg = dataclasses.replace(cfg, output_dir=output_dir)
    return cfg


def _out(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _resolve_physics(cfg: ExperimentConfig) -> ExperimentConfig:
    """Fill the fitted scale and calibrated fragile gain if still missing."""
    spec, params = cfg.scenario, cfg.stft
    if params.scale is None:
        params = fit_normalization(spec, params)
    if spec.fragile_amplitude > 0 and spec.fragile_gain == 0.0:
        spec = dataclasses.replace(
            spec, fragile_gain=calibrate_fragile_gain(spec, params)
        )
    return dataclasses.replace(cfg, scenario=spec, stft=params)


def _read_split(out: Path) -> SpectraSplit:
    paths = [out / f"{name}.spectra" for name in _SPLITS]
    missing = [str(p) for p in paths if not p.exists()]
    if missing:
        raise ValueError(
            f"missing spectrogram dataset {missing}; run `grlforge spectro` first"
        )
    return SpectraSplit(*(datasets.read_spectra(p) for p in paths))


def _merge_train(cfg: ExperimentConfig, mode, lam, epsilon, epochs, seed):
    """Flags override config keys; cnn mode pins lambda to 0 with a warning."""
    if seed is not None:
        cfg = dataclasses.replace(cfg, seed=seed)
    tc = cfg.train
    fields = {}
    if mode is not None:
        fields["mode"] = mode.upper()
    if lam is not None:
        fields["lam"] = lam
    if epsilon is not None:
        fields["epsilon"] = epsilon
    if epochs is not None:
        fields["epochs"] = epochs
    merged_mode = fields.get("mode", tc.mode)
    merged_lam = fields.get("lam", tc.lam)
    if merged_mode == "CNN" and merged_lam != 0.0:
        click.echo("warning: cnn mode forces lambda = 0 (ignoring the requested "
                   f"lambda {merged_lam})", err=True)
        fields["lam"] = 0.0
    if fields:
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(tc, **fields))
    return cfg


_config_opt = click.option("--config", "-c", "config_path", required=True,
                           type=click.Path(exists=True, dir_okay=False),
                           help="Experiment configuration file.")
_outdir_opt = click.option("--output-dir", "-o", default=None,
                           help="Override the configured output directory.")


@click.group()
def cli():
    """Synthetic EM-signal lab: synthesis, training, sweeps, analysis."""


@cli.command("synth")
@_config_opt
@_outdir_opt
def synth_cmd(config_path, output_dir):
    """Generate the raw trace dataset and its manifest."""
    cfg = _resolve_physics(_load(config_path, output_dir))
    out = _out(cfg)
    traces = []
    for d in range(cfg.scenario.n_domains):
        traces.extend(domain_timeline(cfg.scenario, d, cfg.n_per_domain))
    synth.write_traces(out / "traces", traces, cfg.scenario)
    write_config(out / "config.txt", cfg)
    click.echo(f"wrote {len(traces)} traces across {cfg.scenario.n_domains} "
               f"collections to {out / 'traces'}")


@cli.command("spectro")
@_config_opt
@_outdir_opt
def spectro_cmd(config_path, output_dir):
    """Transform stored traces into the three spectrogram splits."""
    cfg = _load(config_path, output_dir)
    out = _out(cfg)
    tracedir = out / "traces"
    if not (tracedir / "manifest.txt").exists():
        raise ValueError(f"no trace dataset at {tracedir}; run `grlforge synth` first")
    traces, spec = synth.read_traces(tracedir)
    cfg = dataclasses.replace(cfg, scenario=spec)  # manifest describes the data
    spec = cfg.scenario
    params = cfg.stft
    if params.scale is None:
        params = fit_normalization(spec, params)
        cfg = dataclasses.replace(cfg, stft=params)
    by_domain = [[] for _ in range(spec.n_domains)]
    for t in traces:
        by_domain[t.domain_label].append(t)
    split = synth.split_dataset(by_domain, cfg.train_fraction,
                                cfg.buffer_fraction, cfg.held_out)
    for name, items in zip(_SPLITS, (split.train, split.validation, split.test)):
        datasets.write_spectra(out / f"{name}.spectra",
                               spectra_from_traces(items, params))
    write_config(out / "config.txt", cfg)
    click.echo(f"wrote splits {len(split.train)}/{len(split.validation)}/"
               f"{len(split.test)} (train/validation/test) to {out}")


@cli.command("train")
@_config_opt
@_outdir_opt
@click.option("--mode", type=click.Choice(["cnn", "otf", "tci"],
                                          case_sensitive=False), default=None)
@click.option("--lambda", "lam", type=float, default=None,
              help="Gradient reversal strength.")
@click.option("--epsilon", type=float, default=None, help="Robust noise radius.")
@click.option("--epochs", type=int, default=None)
@click.option("--seed", type=int, default=None)
def train_cmd(config_path, output_dir, mode, lam, epsilon, epochs, seed):
    """Train one model; writes per-epoch metrics and the best checkpoint."""
    cfg = _merge_train(_load(config_path, output_dir), mode, lam, epsilon,
                       epochs, seed)
    out = _out(cfg)
    split = _read_split(out)
    tc = cfg.train
    result = training.train(training.model_for(split, tc), split, tc)
    tag = f"{tc.mode.lower()}_seed{tc.seed}"
    training.write_metrics_csv(out / f"metrics_{tag}.csv", result.metrics)
    save_model(out / f"model_{tag}.ckpt", result.best_model)
    write_config(out / "config.txt", cfg)
    best = result.metrics[result.best_epoch]
    click.echo(f"{tc.mode} seed {tc.seed}: best epoch {result.best_epoch} "
               f"val {best.val_label_acc:.1f} test {best.test_label_acc:.1f} "
               f"-> metrics_{tag}.csv, model_{tag}.ckpt")


@cli.command("sweep")
@_config_opt
@_outdir_opt
@click.option("--param", type=click.Choice(["epsilon", "lambda"]), required=True)
def sweep_cmd(config_path, output_dir, param):
    """Grid sweep with plateau selection; epsilon must run before lambda."""
    cfg = _load(config_path, output_dir)
    out = _out(cfg)
    split = _read_split(out)
    if param == "epsilon":
        result = sweeps.sweep_epsilon(split, cfg.train, grid=cfg.epsilon_grid,
                                      tau=cfg.tau, replicates=cfg.replicates)
    else:
        eps_csv, eps_star = out / "sweep_epsilon.csv", out / "star_epsilon.csv"
        if not (eps_csv.exists() and eps_star.exists()):
            raise ValueError(
                "staging rule: the epsilon sweep fixes the robust radius before "
                f"lambda is scanned; run `grlforge sweep --param epsilon` first "
                f"(missing {eps_csv} / {eps_star})"
            )
        eps_result = sweeps.read_sweep_result(eps_csv, eps_star)
        result = sweeps.sweep_lambda(split, cfg.train, eps_result,
                                     grid=cfg.lambda_grid, tau=cfg.tau,
                                     replicates=cfg.replicates)
    sweeps.write_sweep_csv(out / f"sweep_{param}.csv", result)
    sweeps.write_star_csv(out / f"star_{param}.csv", result)
    write_config(out / "config.txt", cfg)
    click.echo(f"{param} star = {result.star} (tau {result.tau}) "
               f"-> sweep_{param}.csv, star_{param}.csv")


@cli.command("explain")
@_config_opt
@_outdir_opt
@click.option("--checkpoint", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--item", "items", type=int, multiple=True, default=(0,),
              help="Dataset item indices to explain (repeatable).")
@click.option("--split", "split_name", type=click.Choice(_SPLITS), default="test")
def explain_cmd(config_path, output_dir, checkpoint, items, split_name):
    """LIME explanations for single inputs plus a frequency-importance profile."""
    cfg = _load(config_path, output_dir)
    out = _out(cfg)
    model = load_model(checkpoint)
    ds = datasets.read_spectra(out / f"{split_name}.spectra")
    bad = [i for i in items if not 0 <= i < len(ds)]
    if bad:
        raise ValueError(f"items {bad} outside [0, {len(ds)}) of split {split_name}")
    seg = analysis.GridSegmentation(ds.X.shape[2:], cfg.freq_bands,
                                    cfg.time_blocks)
    blackbox = analysis.dann_blackbox(model, cfg.class_index)
    explanations = []
    for i in items:
        exp = analysis.lime_explain(blackbox, ds.X[i], seg, cfg.n_perturb,
                                    cfg.kernel_width, seed=cfg.seed + i)
        analysis.write_explanation_csv(out / f"explanation_item{i}.csv", exp)
        explanations.append(exp)
    importance = analysis.aggregate_frequency_importance(explanations)
    freqs = [row_center_hz(seg.band_center_row(b), cfg.scenario.sample_rate,
                           cfg.stft) for b in range(cfg.freq_bands)]
    analysis.write_frequency_importance_csv(out / "frequency_importance.csv",
                                            freqs, importance)
    write_config(out / "config.txt", cfg)
    click.echo(f"explained {len(items)} item(s); peak frequency band at "
               f"{freqs[int(np.argmax(importance))]:.0f} Hz")


@cli.command("audit")
@_config_opt
@_outdir_opt
@click.option("--split", "split_name", type=click.Choice(_SPLITS), default="test")
@click.option("--epsilon", type=float, default=None,
              help="Attack radius (defaults to train.epsilon).")
def audit_cmd(config_path, output_dir, split_name, epsilon):
    """Usefulness audit (rho vs gamma) of every per-plane row-energy feature."""
    cfg = _load(config_path, output_dir)
    out = _out(cfg)
    ds = datasets.read_spectra(out / f"{split_name}.spectra")
    eps = cfg.train.epsilon if epsilon is None else epsilon
    n, planes, F, T = ds.X.shape
    X_flat = ds.X.reshape(n, -1)
    y_pm = 2 * ds.y - 1
    reports = []
    for p in range(planes):
        for r in range(F):
            w = np.zeros((planes, F, T))
            w[p, r, :] = 1.0 / T
            f = analysis.linear_feature(w.ravel())
            reports.append(analysis.audit_feature(
                f, X_flat, y_pm, eps, name=f"plane{p}_row{r}"
            ))
    analysis.write_usefulness_csv(out / "usefulness.csv", reports)
    write_config(out / "config.txt", cfg)
    top = max(reports, key=lambda rep: rep.gamma)
    click.echo(f"audited {len(reports)} features at epsilon {eps}; most robustly "
               f"useful: {top.feature} (gamma {top.gamma:.4f})")


@cli.command("ensemble")
@_config_opt
@_outdir_opt
@click.argument("checkpoints", nargs=-1, required=True,
                type=click.Path(exists=True, dir_okay=False))
@click.option("--split", "split_name", type=click.Choice(_SPLITS), default="test")
def ensemble_cmd(config_path, output_dir, checkpoints, split_name):
    """Hard modal vote of several trained members over one dataset split."""
    cfg = _load(config_path, output_dir)
    out = _out(cfg)
    ds = datasets.read_spectra(out / f"{split_name}.spectra")
    preds = []
    for path in checkpoints:
        model = load_model(path)
        label_probs, _ = training._forward_probs(model, ds.X)
        preds.append(predict_label(label_probs))
    result = training.hard_ensemble(np.stack(preds), truth=ds.y)
    training.write_ensemble_csv(out / "ensemble.csv", result, ds.y)
    write_config(out / "config.txt", cfg)
    click.echo(f"ensemble of {len(checkpoints)} members on {split_name}: "
               f"accuracy {result.accuracy:.1f} -> ensemble.csv")


@cli.command("report")
@_config_opt
@_outdir_opt
def report_cmd(config_path, output_dir):
    """Summarize every artifact found in the output directory."""
    cfg = _load(config_path, output_dir)
    out = _out(cfg)
    lines = [f"run report: {out}", ""]
    for metrics in sorted(out.glob("metrics_*.csv")):
        rows = metrics.read_text(encoding="utf-8").splitlines()[1:]
        by_split = {}
        for row in rows:
            epoch, name, label_acc, *_ = row.split(",")
            by_split[name] = (epoch, label_acc)
        summary = ", ".join(f"{name} {float(acc):.1f}" for name, (_, acc)
                            in sorted(by_split.items()))
        lines.append(f"{metrics.name}: final epoch {summary}")
    for star in sorted(out.glob("star_*.csv")):
        param, value, tau = star.read_text(encoding="utf-8") \
            .splitlines()[1].split(",")
        lines.append(f"{star.name}: {param} star {value} (tau {tau})")
    ensemble = out / "ensemble.csv"
    if ensemble.exists():
        rows = ensemble.read_text(encoding="utf-8").splitlines()[1:]
        hits = sum(1 for row in rows if row.split(",")[1] == row.split(",")[2])
        lines.append(f"ensemble.csv: {hits}/{len(rows)} items voted correctly")
    importance = out / "frequency_importance.csv"
    if importance.exists():
        rows = importance.read_text(encoding="utf-8").splitlines()[1:]
        hz, imp = max((row.split(",") for row in rows),
                      key=lambda pair: float(pair[1]))
        lines.append(f"frequency_importance.csv: peak at {float(hz):.0f} Hz "
                     f"(importance {float(imp):.3f})")
    if len(lines) == 2:
        lines.append("no artifacts found")
    text = "\n".join(lines) + "\n"
    (out / "report.txt").write_text(text, encoding="utf-8", newline="\n")
    click.echo(text, nl=False)


def main(argv=None) -> int:
    """Exit codes: 0 success, 1 user error, 2 internal invariant violation."""
    try:
        cli.main(args=argv, prog_name="grlforge", standalone_mode=False)
    except click.exceptions.Exit as e:
        return int(e.exit_code)
    except click.UsageError as e:
        click.echo(f"error: {e.format_message()}", err=True)
        return 1
    except click.ClickException as e:
        e.show()
        return 1
    except click.Abort:
        return 1
    except (ValueError, OSError, KeyError) as e:
        click.echo(f"error: {e}", err=True)
        return 1
    except Exception as e:  # pragma: no cover - invariant breakage
        click.echo(f"internal error: {e!r}", err=True)
        return 2
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
