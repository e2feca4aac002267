"""Command line driver.

Subcommands map one-to-one onto pipeline stages; every stage reads its
inputs from the output directory, so any stage can be re-run from
persisted artifacts.  Artifacts are deterministic for a fixed resolved
configuration; wall-clock timestamps go to ``sidecar.json`` only.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime
import glob
import json
import logging
import os
import sys

import numpy as np

from . import __version__
from .axion import AxionHypothesis
from .calibration import (
    read_calibration_results,
    run_calibration,
    write_calibration_results,
)
from .campaign import rescan_steps, simulate_campaign, simulate_rescans
from .config import load_config
from .errors import ConfigError, DataError, HaloscanError, NumericError
from .inference import run_exclusion, write_exclusion_result
from .pipeline import (
    check_persistence,
    flag_rescans,
    process_campaign,
    process_group,
    read_grand_spectrum,
    write_grand_spectrum,
    write_json,
)
from .receiver import noise_budget, report_enhancement
from .spectra import (
    read_calibration_set,
    read_spectrum,
    write_calibration_set,
    write_spectrum,
)

log = logging.getLogger("haloscan")

STAGES = ("simulate", "calibrate", "process", "exclude", "budget", "enhancement")

_MANIFEST = "manifest.json"
_SIDECAR = "sidecar.json"


class Workspace:
    """Fixed layout of the output directory."""

    def __init__(self, root):
        self.root = root

    def path(self, *parts):
        return os.path.join(self.root, *parts)

    @property
    def spectra_dir(self):
        return self.path("spectra")

    @property
    def calibration_dir(self):
        return self.path("calibration")

    @property
    def cal_results(self):
        return self.path("calibration_results.json")

    @property
    def grand(self):
        return self.path("grand_spectrum.dat")

    @property
    def rescan_dir(self):
        return self.path("rescans")

    @property
    def rescan_grand(self):
        return self.path("rescans", "grand_spectrum.dat")

    @property
    def exclusion_dir(self):
        return self.path("exclusion")

    def step_file(self, step_id):
        return os.path.join(self.spectra_dir, f"step_{step_id:05d}.spec")

    def calset_dir(self, step_id):
        return os.path.join(self.calibration_dir, f"step_{step_id:05d}")


def _utc_now():
    return datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")


def _update_manifest(ws, cfg, stage, artifacts):
    """Record stage completion; deterministic content, no timestamps."""
    path = ws.path(_MANIFEST)
    manifest = {
        "format": "haloscan-manifest",
        "version": 1,
        "config_hash": cfg.hash(),
        "master_seed": cfg.master_seed,
        "package_version": __version__,
        "stages": {},
    }
    if os.path.exists(path):
        try:
            with open(path) as fh:
                previous = json.load(fh)
        except (OSError, json.JSONDecodeError):
            previous = {}
        if previous.get("config_hash") == manifest["config_hash"]:
            manifest["stages"] = previous.get("stages", {})
    manifest["stages"][stage] = {"artifacts": sorted(artifacts)}
    write_json(manifest, path)

    sidecar_path = ws.path(_SIDECAR)
    sidecar = {"stages": {}}
    if os.path.exists(sidecar_path):
        try:
            with open(sidecar_path) as fh:
                sidecar = json.load(fh)
        except (OSError, json.JSONDecodeError):
            sidecar = {"stages": {}}
    sidecar.setdefault("stages", {})[stage] = _utc_now()
    write_json(sidecar, sidecar_path)


def _relpaths(ws, paths):
    return [os.path.relpath(p, ws.root) for p in paths]


# -- stages ---------------------------------------------------------


def stage_simulate(cfg, ws, threads):
    plan = cfg.tuning_plan()
    if plan.n_steps == 0:
        raise ConfigError("tuning plan is empty; nothing to simulate")
    receiver = cfg.receiver()
    baseline = cfg.baseline_model()
    log.info("simulating %d steps", plan.n_steps)
    spectra, calsets = simulate_campaign(
        plan,
        receiver,
        baseline,
        hypotheses=cfg.hypotheses(),
        lineshape=cfg.lineshape(),
        tau_s=cfg.get("acquisition", "tau_s"),
        bin_width_hz=cfg.get("acquisition", "bin_width_hz"),
        n_bins=cfg.get("acquisition", "n_bins"),
        anomaly_rate=cfg.get("anomalies", "rate"),
        anomaly_types=cfg.get("anomalies", "types"),
        cal_every=cfg.get("calibration", "cal_every"),
        t_hot_k=cfg.get("calibration", "t_hot_k"),
        t_cold_k=cfg.get("calibration", "t_cold_k"),
        threads=threads,
    )
    os.makedirs(ws.spectra_dir, exist_ok=True)
    artifacts = []
    for spectrum in spectra:
        path = ws.step_file(spectrum.step_id)
        write_spectrum(spectrum, path)
        artifacts.append(path)
    for calset in calsets:
        directory = ws.calset_dir(calset.step_id)
        write_calibration_set(calset, directory)
        artifacts.append(directory)
    _update_manifest(ws, cfg, "simulate", _relpaths(ws, artifacts))
    log.info("wrote %d spectra, %d calibration sets", len(spectra), len(calsets))


def _load_spectra(ws):
    paths = sorted(glob.glob(os.path.join(ws.spectra_dir, "step_*.spec")))
    if not paths:
        raise DataError(f"no spectra found under {ws.spectra_dir}; run simulate first")
    return [read_spectrum(p) for p in paths]


def stage_calibrate(cfg, ws):
    dirs = sorted(glob.glob(os.path.join(ws.calibration_dir, "step_*")))
    dirs = [d for d in dirs if os.path.isdir(d)]
    if not dirs:
        raise DataError(
            f"no calibration sets found under {ws.calibration_dir}; run simulate first"
        )
    geometry = cfg.receiver()
    results = [_calibrate_one(cfg, geometry, d) for d in dirs]
    write_calibration_results(results, ws.cal_results)
    _update_manifest(ws, cfg, "calibrate", _relpaths(ws, [ws.cal_results]))
    log.info("calibrated %d sets", len(results))


def _calibrate_one(cfg, geometry, directory):
    calset = read_calibration_set(directory)
    return run_calibration(calset, geometry, eta=cfg.get("receiver", "eta"))


def stage_process(cfg, ws, threads):
    spectra = _load_spectra(ws)
    if not os.path.exists(ws.cal_results):
        raise DataError(f"{ws.cal_results} not found; run calibrate first")
    cal_results = read_calibration_results(ws.cal_results)
    geometry = cfg.receiver()
    lineshape = cfg.lineshape()
    settings = cfg.process_settings()
    tau_s = cfg.get("acquisition", "tau_s")
    snr_ref = cfg.get("sensitivity", "snr_ref")

    out = process_campaign(
        spectra, cal_results, geometry, lineshape, settings,
        tau_s=tau_s, snr_ref=snr_ref, threads=threads,
    )
    artifacts = [ws.grand, ws.path("cut_log.json"),
                 ws.path("filter_report.json"), ws.path("rescan_candidates.json")]
    write_grand_spectrum(out.grand, ws.grand)
    write_json(out.cut_log.to_dict(), ws.path("cut_log.json"))
    write_json(
        {
            "t_signal": out.filter_report.t_signal,
            "wide_suppression": out.filter_report.wide_suppression,
            "if_window_bins": settings.if_window_bins,
            "if_order": settings.if_order,
            "rf_window_bins": settings.rf_window_bins,
            "rf_order": settings.rf_order,
            "n_spectra": out.filter_report.n_spectra,
        },
        ws.path("filter_report.json"),
    )
    write_json(out.rescans.to_dict(), ws.path("rescan_candidates.json"))
    log.info(
        "processed %d spectra (%d cut), %d rescan candidates",
        len(out.processed), out.cut_log.n_cut, len(out.rescans.candidates),
    )

    if out.rescans.candidates:
        artifacts += _rescan_followup(cfg, ws, out, cal_results, threads)
    _update_manifest(ws, cfg, "process", _relpaths(ws, artifacts))


def _rescan_followup(cfg, ws, out, cal_results, threads):
    plan = cfg.tuning_plan()
    geometry = cfg.receiver()
    lineshape = cfg.lineshape()
    settings = cfg.process_settings()
    tau_s = cfg.get("acquisition", "tau_s")
    snr_ref = cfg.get("sensitivity", "snr_ref")
    steps = rescan_steps(plan, [c.nu_hz for c in out.rescans.candidates])
    log.info("re-acquiring %d steps for %d candidates",
             len(steps), len(out.rescans.candidates))
    rescans = simulate_rescans(
        plan,
        steps,
        geometry,
        cfg.baseline_model(),
        hypotheses=cfg.hypotheses(),
        lineshape=lineshape,
        tau_s=tau_s,
        bin_width_hz=cfg.get("acquisition", "bin_width_hz"),
        n_bins=cfg.get("acquisition", "n_bins"),
        threads=threads,
    )
    spectra_dir = os.path.join(ws.rescan_dir, "spectra")
    os.makedirs(spectra_dir, exist_ok=True)
    artifacts = []
    for spectrum in rescans:
        path = os.path.join(spectra_dir, f"step_{spectrum.step_id:05d}.spec")
        write_spectrum(spectrum, path)
        artifacts.append(path)
    grand, _, _, _ = process_group(
        rescans, cal_results, geometry, lineshape, settings,
        tau_s=tau_s, snr_ref=snr_ref, threads=threads,
    )
    write_grand_spectrum(grand, ws.rescan_grand)
    refl = flag_rescans(grand, settings.rescan_threshold_sigma, settings.merge_width_bins)
    write_json(refl.to_dict(), os.path.join(ws.rescan_dir, "candidates.json"))
    persistence = check_persistence(
        out.rescans.candidates, grand,
        settings.rescan_threshold_sigma, settings.merge_width_bins,
    )
    write_json({"candidates": persistence}, os.path.join(ws.rescan_dir, "persistence.json"))
    artifacts += [
        ws.rescan_grand,
        os.path.join(ws.rescan_dir, "candidates.json"),
        os.path.join(ws.rescan_dir, "persistence.json"),
    ]
    return artifacts


def stage_exclude(cfg, ws):
    if not os.path.exists(ws.grand):
        raise DataError(f"{ws.grand} not found; run process first")
    initial = read_grand_spectrum(ws.grand)
    followups = []
    if os.path.exists(ws.rescan_grand):
        followups.append(read_grand_spectrum(ws.rescan_grand))
    band = (cfg.get("campaign", "lo_hz"), cfg.get("campaign", "hi_hz"))
    result = run_exclusion(
        initial,
        tuple(followups),
        target=cfg.get("inference", "target"),
        g_grid=cfg.g_grid(),
        n_windows=cfg.get("inference", "n_windows"),
        xtol=cfg.get("inference", "xtol"),
        band_hz=band,
        metadata={
            "config_hash": cfg.hash(),
            "master_seed": cfg.master_seed,
            "package_version": __version__,
            "n_followups": len(followups),
            "band_hz": [band[0], band[1]],
        },
    )
    write_exclusion_result(result, ws.exclusion_dir)
    artifacts = [
        os.path.join(ws.exclusion_dir, name)
        for name in ("exclusion.json", "exclusion_curve.csv",
                     "window_contours.csv", "window_surface.csv")
    ]
    _update_manifest(ws, cfg, "exclude", _relpaths(ws, artifacts))
    if result.g_star is None:
        log.warning("exclusion target not bracketed by the coupling grid")
    else:
        log.info("excluded couplings above %.4f at target %.3f",
                 result.g_star, result.target)


def _write_budget_csv(budget, path):
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        fh.write(",".join(budget.CSV_COLUMNS) + "\n")
        np.savetxt(fh, budget.columns(), fmt="%.10e", delimiter=",")
    os.replace(tmp, path)


def stage_budget(cfg, ws):
    receiver = cfg.receiver()
    hyp = AxionHypothesis(
        nu_a_hz=receiver.nu_c, g_ksvz=1.0, snr_ref=cfg.get("sensitivity", "snr_ref")
    )
    half_span = (cfg.get("acquisition", "n_bins") // 2) * cfg.get(
        "acquisition", "bin_width_hz"
    )
    detunings = np.linspace(-half_span, half_span, 3001)
    artifacts = []
    for name, params in (
        ("budget.csv", receiver),
        ("budget_unsqueezed.csv", dataclasses.replace(receiver, g_s=1.0)),
    ):
        path = ws.path(name)
        _write_budget_csv(noise_budget(params, detunings, hyp), path)
        artifacts.append(path)
    _update_manifest(ws, cfg, "budget", _relpaths(ws, artifacts))
    log.info("wrote noise budgets over +-%.0f Hz", half_span)


def stage_enhancement(cfg, ws):
    squeezed = cfg.receiver()
    unsqueezed = dataclasses.replace(squeezed, g_s=1.0)
    hyp = AxionHypothesis(
        nu_a_hz=squeezed.nu_c, g_ksvz=1.0, snr_ref=cfg.get("sensitivity", "snr_ref")
    )
    report = report_enhancement(squeezed, unsqueezed, hyp)
    report.update(
        {
            "eta": squeezed.eta,
            "g_s": squeezed.g_s,
            "delivered_squeezing": squeezed.delivered,
            "n_c0": squeezed.n_c0,
            "n_f": squeezed.n_f,
            "n_a": squeezed.n_a,
            "config_hash": cfg.hash(),
        }
    )
    path = ws.path("enhancement.json")
    write_json(report, path)
    _update_manifest(ws, cfg, "enhancement", _relpaths(ws, [path]))
    log.info("scan-rate ratio %.3f at couplings %.3f / %.3f",
             report["rate_ratio"], report["beta_squeezed"], report["beta_unsqueezed"])


# -- driver ---------------------------------------------------------


def _run_stage(stage, cfg, ws, threads):
    if stage == "simulate":
        stage_simulate(cfg, ws, threads)
    elif stage == "calibrate":
        stage_calibrate(cfg, ws)
    elif stage == "process":
        stage_process(cfg, ws, threads)
    elif stage == "exclude":
        stage_exclude(cfg, ws)
    elif stage == "budget":
        stage_budget(cfg, ws)
    elif stage == "enhancement":
        stage_enhancement(cfg, ws)
    else:
        raise ConfigError(f"unknown stage {stage!r}")


def _add_common(parser):
    parser.add_argument("--config", required=True, help="campaign configuration file")
    parser.add_argument("--out", default=None, help="output directory (default: [output] directory)")
    parser.add_argument("--seed-override", type=int, default=None,
                        help="replace campaign.master_seed for this run")
    parser.add_argument("--threads", type=int, default=1,
                        help="worker threads for per-step stages")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="haloscan",
        description="Simulate and analyze a squeezed-receiver cavity dark matter scan.",
    )
    parser.add_argument("--version", action="version", version=f"haloscan {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    descriptions = {
        "simulate": "generate science spectra and calibration sets",
        "calibrate": "fit receiver parameters from calibration sets",
        "process": "remove structure, combine, coadd, flag and re-acquire candidates",
        "exclude": "compute the aggregate exclusion and windowed limits",
        "budget": "tabulate the per-component noise budget",
        "enhancement": "compare optimized squeezed and unsqueezed scan rates",
        "all": "run every stage in order",
    }
    for name in STAGES + ("all",):
        p = sub.add_parser(name, help=descriptions[name])
        _add_common(p)
    p = sub.add_parser("run", help="run one named stage")
    _add_common(p)
    p.add_argument("--stage", required=True, choices=STAGES + ("all",))
    return parser


def _configure_logging():
    level_name = os.environ.get("HALOSCAN_LOG", "warning").strip().lower()
    levels = {
        "debug": logging.DEBUG,
        "info": logging.INFO,
        "warning": logging.WARNING,
        "error": logging.ERROR,
    }
    if level_name not in levels:
        print(
            json.dumps({"error": "ConfigError",
                        "message": f"HALOSCAN_LOG must be one of {sorted(levels)}, "
                                   f"got {level_name!r}"}),
            file=sys.stderr,
        )
        return None
    logging.basicConfig(
        stream=sys.stderr,
        level=levels[level_name],
        format="%(levelname)s %(name)s: %(message)s",
    )
    return levels[level_name]


def _fail(exc, code):
    print(
        json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code}),
        file=sys.stderr,
    )
    log.debug("failing with code %d", code, exc_info=True)
    return code


def main(argv=None):
    if _configure_logging() is None:
        return 2
    parser = build_parser()
    args = parser.parse_args(argv)
    command = args.command
    if command == "run":
        command = args.stage
    try:
        cfg = load_config(args.config, seed_override=args.seed_override)
        if args.threads < 1:
            raise ConfigError(f"--threads must be >= 1, got {args.threads}")
        out_dir = args.out if args.out is not None else cfg.get("output", "directory")
        ws = Workspace(out_dir)
        os.makedirs(ws.root, exist_ok=True)
        stages = STAGES if command == "all" else (command,)
        for stage in stages:
            log.info("stage %s", stage)
            _run_stage(stage, cfg, ws, args.threads)
    except ConfigError as exc:
        return _fail(exc, 2)
    except NumericError as exc:
        return _fail(exc, 3)
    except (DataError, OSError) as exc:
        return _fail(exc, 4)
    except HaloscanError as exc:  # base class: treat as config misuse
        return _fail(exc, 2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
