"""Command-line entry point: ``echobp synth|run|pwv|eval``."""
import json
import sys

import click

from .errors import EchoBPError
from .evaluation import ALIGNMENTS, evaluate
from .phantom import GroundTruth, PhantomConfig, synth_rf
from .pipeline import SessionConfig, locate_walls, read_csv, run_pipeline, write_json
from .pwv import pwv_session
from .rfio import read_rf, write_rf


def _fail(exc):
    click.echo(f"error: {exc}", err=True)
    sys.exit(1)


class _Group(click.Group):
    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except EchoBPError as exc:
            _fail(exc)
        except (OSError, json.JSONDecodeError) as exc:
            _fail(exc)


@click.group(cls=_Group)
def main():
    """Blood-pressure waveforms from three-channel ultrasound RF streams."""


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
              help="Phantom configuration (JSON); defaults are used for missing keys.")
@click.option("--preset", type=click.Choice(["phantom", "tissue"]), default="phantom",
              show_default=True)
@click.option("-o", "--output", required=True, type=click.Path(dir_okay=False))
@click.option("--truth", type=click.Path(dir_okay=False), help="Ground-truth JSON sidecar.")
@click.option("--seed", type=int, default=None, help="Override the config rng_seed.")
def synth(config_path, preset, output, truth, seed):
    """Synthesize a phantom RF stream."""
    overrides = {}
    if config_path:
        with open(config_path) as fh:
            overrides = json.load(fh)
    if seed is not None:
        overrides["rng_seed"] = seed
    base = PhantomConfig.preset(preset).to_dict()
    cfg = PhantomConfig.from_dict({**base, **overrides})
    stream, gt = synth_rf(cfg)
    n = write_rf(output, stream)
    if truth:
        gt.save(truth)
    click.echo(f"wrote {n} frames x {cfg.n_channels} channels to {output}")


@main.command()
@click.option("-i", "--input", "input_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--dbp", type=float, required=True, help="Cuff diastolic pressure (mmHg).")
@click.option("-o", "--output", type=click.Path(dir_okay=False), help="Waveform CSV.")
@click.option("--beats", type=click.Path(dir_okay=False), help="Per-beat JSON.")
@click.option("--summary", type=click.Path(dir_okay=False), help="Session summary JSON.")
@click.option("--rho", type=float, default=1060.0, show_default=True)
@click.option("--assess", type=float, default=10.0, show_default=True,
              help="PWV assessment period (s).")
@click.option("--reassess", type=float, default=None, help="PWV re-assessment interval (s).")
@click.option("--gate", type=float, default=15.0, show_default=True, help="SNR gate (dB).")
@click.option("--workers", type=int, default=1, show_default=True)
def run(input_path, dbp, output, beats, summary, rho, assess, reassess, gate, workers):
    """Reconstruct the pressure waveform from an RF file."""
    stream = read_rf(input_path)
    cfg = SessionConfig(dbp_input_mmHg=dbp, rho_kg_m3=rho, assess_duration_s=assess,
                        pwv_reassess_interval_s=reassess, snr_gate_db=gate, workers=workers,
                        csv_path=output, beats_path=beats, summary_path=summary)
    res = run_pipeline(stream, cfg)
    click.echo(f"PWV {res.pwv.mean_mps:.2f} ± {res.pwv.sd_mps:.2f} m/s, "
               f"{len(res.beats)} beats, diameter channel {res.diameter_channel}")


@main.command()
@click.option("-i", "--input", "input_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--assess", type=float, default=10.0, show_default=True)
@click.option("--gate", type=float, default=15.0, show_default=True)
@click.option("--workers", type=int, default=1, show_default=True)
def pwv(input_path, assess, gate, workers):
    """Print the session PWV (mean ± SD, m/s)."""
    stream = read_rf(input_path)
    regions = locate_walls(stream, gate)
    est, _ = pwv_session(stream, regions, assess, workers=workers)
    click.echo(f"{est.mean_mps:.2f} ± {est.sd_mps:.2f} m/s")


@main.command("eval")
@click.option("--measured", required=True, type=click.Path(exists=True, dir_okay=False),
              help="Waveform CSV from `run`.")
@click.option("--reference", required=True, type=click.Path(exists=True, dir_okay=False),
              help="Ground-truth JSON from `synth`.")
@click.option("-o", "--output", type=click.Path(dir_okay=False), help="Report JSON.")
@click.option("--beats", type=click.Path(exists=True, dir_okay=False),
              help="Beats JSON from `run`; its onsets pair the beats when no summary is given.")
@click.option("--summary", type=click.Path(exists=True, dir_okay=False),
              help="Summary JSON from `run`; gives the reference channel and beat onsets.")
@click.option("--channel", type=int, default=None, help="Reference channel (default 0).")
@click.option("--alignment", type=click.Choice(ALIGNMENTS), default=ALIGNMENTS[0],
              show_default=True)
def eval_cmd(measured, reference, output, beats, summary, channel, alignment):
    """Compare a measured waveform with the phantom ground truth."""
    p, _ = read_csv(measured)
    gt = GroundTruth.load(reference)
    info = {}
    if summary:
        with open(summary) as fh:
            info = json.load(fh)
    if channel is None:
        channel = int(info.get("diameter_channel", 0))
    onsets = info.get("beat_onsets_s")
    if beats and not onsets:
        with open(beats) as fh:
            onsets = [float(b["onset_s"]) for b in json.load(fh)]
    rep = evaluate(p, gt.pressure_at_channel(channel), onsets, alignment)
    if output:
        write_json(output, rep.to_dict())
    ba = rep.bland_altman
    click.echo(f"RMSE {rep.rmse:.3f} mmHg, r {rep.pearson_r:.4f}, "
               f"PP MAE {rep.mae:.2f} ± {rep.sd_of_error:.2f} mmHg, "
               f"bias {ba.mean_diff:.2f} [{ba.loa_low:.2f}, {ba.loa_high:.2f}]")


if __name__ == "__main__":
    main()
