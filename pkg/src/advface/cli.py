"""Command-line entry point: ``advface <command> --config exp.yaml [--set key=value ...]``."""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
import time
from dataclasses import replace
from functools import cached_property
from pathlib import Path

import numpy as np
import torch
import yaml

from . import __version__
from .atn import build_atn, load_atn
from .attacks import (
    PgdConfig,
    atn_attack,
    fgsm_attack,
    load_uap,
    pgd_attack,
    train_atn,
    train_uap,
    uap_attack,
)
from .config import METHODS, ConfigError, ExperimentConfig, load_config
from .dataset import (
    DatasetError,
    ImageStore,
    build_gallery_trials,
    build_index,
    build_verification_pairs,
    save_json,
    split_identities,
)
from .evaluation import (
    MetricsReport,
    Threshold,
    average_reports,
    compute_threshold,
    identification_eval,
    timing_bench,
    verification_eval,
    verification_scores,
)
from .facerec import embed_batch, load_victim, save_victim, train_victim
from .perceptual import victim_metric

log = logging.getLogger("advface")

COMMANDS = ("train-victim", "train-atn", "train-uap", "attack", "eval-verification",
            "eval-identification", "bench-timing", "report")


class CommandError(RuntimeError):
    pass


def _dump(obj, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_manifest(directory: Path, command: str, cfg: ExperimentConfig, extra: dict | None = None,
                   name: str = "manifest.json") -> Path:
    """Everything needed to re-run ``command``: full config, its hash, seeds and versions."""
    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "config": cfg.to_dict(),
        "config_hash": cfg.content_hash(),
        "seeds": {
            "split": cfg.dataset.split_seed,
            "pairs": cfg.eval.pair_seed,
            "trials": cfg.eval.trial_seed,
            "victim_init": {e.name: [m.init_seed for m in e.members] for e in cfg.model_sets()},
            "victim_train": cfg.victim_train.seed,
            "attack": cfg.attack.seed,
        },
        "versions": {"advface": __version__, "python": platform.python_version(),
                     "torch": torch.__version__, "numpy": np.__version__},
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
        **(extra or {}),
    }
    path = directory / name
    _dump(manifest, path)
    return path


def _ref_slug(ref: str) -> str:
    return ref.replace("#", "m")


class Workspace:
    """Paths and lazily built data shared by the commands of one experiment."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.out = cfg.out

    # -- data ---------------------------------------------------------------

    @cached_property
    def index(self):
        idx = build_index(self.cfg.dataset.root, self.cfg.dataset.image_size)
        save_json(idx, self.out / "data" / "index.json")
        return idx

    @cached_property
    def split(self):
        s = split_identities(self.index, self.cfg.dataset.eval_fraction, self.cfg.dataset.split_seed)
        save_json(s, self.out / "data" / "split.json")
        return s

    @cached_property
    def store(self) -> ImageStore:
        return ImageStore(self.index)

    @cached_property
    def pairs(self):
        e = self.cfg.eval
        p = build_verification_pairs(self.index, self.split.eval_identities, e.max_pairs, e.pair_seed)
        save_json(p, self.out / "data" / "pairs.json")
        return p

    @cached_property
    def trials(self):
        e = self.cfg.eval
        t = build_gallery_trials(self.index, self.split.eval_identities, e.gallery_size, e.n_trials, e.trial_seed)
        save_json(t, self.out / "data" / "trials.json")
        return t

    def train_images(self):
        x, labels, _ = self.store.identity_tensors(self.split.train_identities)
        return x, labels

    def eval_image_ids(self) -> list[str]:
        groups = self.index.by_identity()
        return [i for ident in sorted(self.split.eval_identities) for i in groups[ident]]

    # -- victims ------------------------------------------------------------

    def victim_path(self, set_name: str, k: int) -> Path:
        return self.out / "victims" / set_name / f"m{k}.pt"

    def threshold_path(self, set_name: str, k: int) -> Path:
        return self.out / "victims" / set_name / f"m{k}.threshold.json"

    def victim(self, set_name: str, k: int):
        path = self.victim_path(set_name, k)
        if not path.exists():
            raise CommandError(f"missing victim checkpoint {path}; run train-victim first")
        return load_victim(path)

    def threshold(self, set_name: str, k: int) -> Threshold:
        path = self.threshold_path(set_name, k)
        if not path.exists():
            raise CommandError(f"missing threshold {path}; run train-victim first")
        return Threshold(**json.loads(path.read_text()))

    def attack_victims(self):
        return [self.victim(s, k) for s, k in self.cfg.attack_members()]

    # -- attacks ------------------------------------------------------------

    def attack_tag(self, method: str) -> str:
        if method == "none":
            return "clean"
        a = self.cfg.attack
        refs = a.train_on or (self.cfg.model_sets()[0].name,)
        return f"{method}-eps{a.eps:g}-" + "+".join(_ref_slug(r) for r in refs)

    def attack_dir(self, method: str) -> Path:
        return self.out / "attacks" / self.attack_tag(method)

    def perceptual_metric(self):
        if not self.cfg.perceptual.lam:
            return None
        ckpt = self.cfg.perceptual.extractor_checkpoint
        if ckpt:
            return victim_metric(load_victim(ckpt))
        attacked = set(self.cfg.attack_members())
        others = [(e.name, k) for e in self.cfg.model_sets() for k in range(len(e.members))
                  if (e.name, k) not in attacked]
        s, k = (others or sorted(attacked))[0]
        return victim_metric(self.victim(s, k))

    def make_attack(self, method: str):
        if method == "none":
            return None
        a = self.cfg.attack
        if method == "atn":
            path = self.attack_dir("atn") / "atn_final.pt"
            if not path.exists():
                raise CommandError(f"missing {path}; run train-atn first")
            gen, _ = load_atn(path)
            return atn_attack(gen, a.eps)
        if method == "uap":
            path = self.attack_dir("uap") / "uap_final.pt"
            if not path.exists():
                raise CommandError(f"missing {path}; run train-uap first")
            return uap_attack(load_uap(path))
        # gradient baselines drop the perceptual term for a like-for-like comparison
        victims = self.attack_victims()
        if method == "fgsm":
            return fgsm_attack(victims, a.eps, 0.0, seed=a.seed)
        return pgd_attack(victims, a.eps, a.pgd, 0.0, seed=a.seed)

    def attack_lambda(self, method: str) -> float | None:
        if method == "none":
            return None
        return self.cfg.perceptual.lam if method in ("atn", "uap") else 0.0


# --- commands ---------------------------------------------------------------


def cmd_train_victim(ws: Workspace, args) -> dict:
    cfg = ws.cfg
    members = cfg.resolve(args.only) if args.only else [
        (e.name, k) for e in cfg.model_sets() for k in range(len(e.members))]
    x, labels = ws.train_images()
    done = []
    for set_name, k in members:
        path = ws.victim_path(set_name, k)
        if path.exists() and not args.force:
            log.info("victim %s#%d exists, skipping", set_name, k)
            continue
        spec = cfg.model_set(set_name).members[k]
        log.info("training victim %s#%d (%d images, %d identities)", set_name, k, len(x), int(labels.max()) + 1)
        model, losses = train_victim(spec, x, labels, cfg.victim_train, checkpoint=path)
        save_victim(model, path)
        thr = compute_threshold(model, ws.pairs, ws.store)
        _dump({"value": thr.value, "model_fingerprint": thr.model_fingerprint}, ws.threshold_path(set_name, k))
        _dump(losses, path.with_suffix(".losses.json"))
        write_manifest(path.parent, "train-victim", cfg, {"members": len(cfg.model_set(set_name).members)})
        done.append(str(path))
    return {"trained": done}


def _cmd_train_perturbation(ws: Workspace, args, method: str) -> dict:
    cfg = ws.cfg
    out = ws.attack_dir(method)
    final = out / f"{method}_final.pt"
    if final.exists() and not args.force:
        log.info("%s exists, skipping", final)
        return {"checkpoint": str(final), "skipped": True}
    victims = ws.attack_victims()
    x, _ = ws.train_images()
    acfg = cfg.attack_config()
    metric = ws.perceptual_metric()
    common = dict(checkpoint_dir=out, checkpoint_every=args.checkpoint_every)
    if method == "atn":
        gen = build_atn(cfg.attack.arch, x.shape[1], cfg.attack.seed)
        train_atn(gen, victims, x, acfg, metric, **common)
    else:
        train_uap(victims, x, acfg, metric, **common)
    write_manifest(out, f"train-{method}", cfg, {"trained_on": [f"{s}#{k}" for s, k in cfg.attack_members()]})
    return {"checkpoint": str(final)}


def cmd_train_atn(ws, args):
    return _cmd_train_perturbation(ws, args, "atn")


def cmd_train_uap(ws, args):
    return _cmd_train_perturbation(ws, args, "uap")


def cmd_attack(ws: Workspace, args) -> dict:
    from PIL import Image

    method = args.method or ws.cfg.attack.method
    attack = ws.make_attack(method)
    out = ws.out / "adversarial" / ws.attack_tag(method)
    ids = ws.eval_image_ids()
    bs = ws.cfg.eval.batch_size
    max_dev = 0.0
    rel_paths = {e.image_id: Path(e.relative_path).with_suffix(".png") for e in ws.index.entries}
    for i in range(0, len(ids), bs):
        chunk = ids[i : i + bs]
        x = ws.store.load(chunk)
        x_adv = attack(x)
        max_dev = max(max_dev, float((x_adv - x).abs().max()))
        if max_dev > ws.cfg.attack.eps + 1e-6:
            raise CommandError(f"attack exceeded eps: {max_dev}")
        for image_id, img in zip(chunk, x_adv):
            dest = out / rel_paths[image_id]
            dest.parent.mkdir(parents=True, exist_ok=True)
            arr = (img.double().clamp(0, 1) * 255).round().to(torch.uint8).permute(1, 2, 0).numpy()
            Image.fromarray(arr).save(dest)
    a = ws.cfg.attack
    extra = {"method": method, "eps": a.eps, "lambda": ws.attack_lambda(method),
             "n_images": len(ids), "max_linf": max_dev,
             "checkpoint": str(ws.attack_dir(method)) if method in ("atn", "uap") else None,
             "victims": [f"{s}#{k}" for s, k in ws.cfg.attack_members()]}
    write_manifest(out, "attack", ws.cfg, extra)
    return {"dir": str(out), "n_images": len(ids)}


def _attacked_store(ws: Workspace, directory: str | None):
    if not directory:
        return None
    d = Path(directory)
    if not d.is_dir():
        raise CommandError(f"attacked directory {d} does not exist")
    entries = tuple(replace(e, relative_path=str(Path(e.relative_path).with_suffix(".png")))
                    for e in ws.index.entries)
    return ImageStore(replace(ws.index, root_path=str(d), entries=entries))


def _provider_cfg(ws: Workspace, name: str) -> dict:
    found = [dict(p) for p in ws.cfg.eval.providers if p.get("name") == name]
    if not found and name != "mock":
        raise CommandError(f"provider {name!r} is not configured under eval.providers")
    cfg = found[0] if found else {"type": "mock", "name": "mock"}
    cfg.setdefault("log_path", str(ws.out / "cloud" / f"{name}.jsonl"))
    return cfg


def _run_eval(ws: Workspace, args, task: str) -> dict:
    from .cloud import cloud_identification_eval, cloud_verification_eval, make_provider

    cfg = ws.cfg
    method = args.method or "none"
    attacked_store = _attacked_store(ws, args.attacked_dir)
    attack = None if attacked_store is not None else ws.make_attack(method)
    tag = f"dir-{Path(args.attacked_dir).name}" if attacked_store is not None else ws.attack_tag(method)
    if args.provider:
        tag += f"@{args.provider}"
    metrics_dir = ws.out / "metrics"
    written = []
    for target, members in cfg.target_sets():
        reports = []
        first_scores = None
        for set_name, k in members:
            model = ws.victim(set_name, k)
            thr = ws.threshold(set_name, k)
            if args.provider:
                prov = make_provider(_provider_cfg(ws, args.provider), model, thr)
                if task == "verification":
                    rep = cloud_verification_eval(prov, ws.pairs, ws.store, attack)
                else:
                    rep = MetricsReport(rank1_acc=cloud_identification_eval(prov, ws.trials, ws.store, attack),
                                        n_trials=len(ws.trials))
            elif task == "verification":
                rep = verification_eval(model, ws.pairs, ws.store, thr, attack, attacked_store=attacked_store)
                if first_scores is None:
                    first_scores = verification_scores(model, ws.pairs, ws.store, attack,
                                                       attacked_store=attacked_store)
            else:
                rep = MetricsReport(rank1_acc=identification_eval(model, ws.trials, ws.store, attack,
                                                                  attacked_store=attacked_store),
                                    n_trials=len(ws.trials))
            rep.name = f"{set_name}#{k}"
            reports.append(rep)
        summary = average_reports(reports, target)
        spec = cfg.model_set(members[0][0]).members[0]
        record = {
            "task": task,
            "attack": {"tag": tag, "method": method if attacked_store is None else "dir",
                       "eps": None if method == "none" else cfg.attack.eps,
                       "lambda": ws.attack_lambda(method) if attacked_store is None else None,
                       "trained_on": [] if method == "none" else [f"{s}#{k}" for s, k in cfg.attack_members()],
                       "provider": args.provider},
            "target": target,
            "architecture": spec.family,
            "loss": spec.loss,
            "n_models": len(members),
            "members": [r.to_json() for r in reports],
            "summary": summary.to_json(),
        }
        stem = f"{task}--{tag}--{_ref_slug(target)}".replace("@", "_at_")
        path = metrics_dir / f"{stem}.json"
        _dump(record, path)
        if first_scores is not None:  # kept for ROC plots
            (metrics_dir / "scores").mkdir(parents=True, exist_ok=True)
            np.savez(metrics_dir / "scores" / f"{stem}.npz", scores=first_scores, labels=ws.pairs.labels)
        write_manifest(metrics_dir, f"eval-{task}", cfg, {"metrics": path.name}, name=f"{stem}.manifest.json")
        written.append(str(path))
        s = summary
        log.info("%s %s on %s: V-AUC %.3f V-Acc %.1f recall %.1f R1 %.1f", task, tag, target,
                 s.v_auc, s.v_acc, s.recall_pos, s.rank1_acc)
    return {"metrics": written}


def cmd_eval_verification(ws, args):
    return _run_eval(ws, args, "verification")


def cmd_eval_identification(ws, args):
    return _run_eval(ws, args, "identification")


def cmd_bench_timing(ws: Workspace, args) -> dict:
    cfg = ws.cfg
    x = ws.store.load(ws.eval_image_ids()[: args.n_images])
    victims = ws.attack_victims()[:1]
    atn_path = ws.attack_dir("atn") / "atn_final.pt"
    gen = load_atn(atn_path)[0] if atn_path.exists() else build_atn(cfg.attack.arch, x.shape[1], cfg.attack.seed)
    uap_path = ws.attack_dir("uap") / "uap_final.pt"
    if uap_path.exists():
        uap = load_uap(uap_path)
    else:
        from .attacks import UapPerturbation

        uap = UapPerturbation(x.shape[1:], cfg.attack.eps)
    pgd_cfg = PgdConfig(steps=cfg.attack.pgd.steps, step_size=cfg.attack.pgd.step_size,
                        random_start=cfg.attack.pgd.random_start)
    methods = {
        "victim_forward": lambda b: embed_batch(victims[0], b),
        "uap": uap_attack(uap),
        "atn": atn_attack(gen, cfg.attack.eps),
        f"pgd{pgd_cfg.steps}": pgd_attack(victims, cfg.attack.eps, pgd_cfg, seed=cfg.attack.seed),
    }
    timing = timing_bench(methods, x, reps=args.reps, warmup=1)
    out = ws.out / "timing"
    _dump({"seconds_per_image": timing, "n_images": len(x), "reps": args.reps,
           "atn_trained": atn_path.exists(), "uap_trained": uap_path.exists(),
           "threads": torch.get_num_threads(), "machine": platform.machine()}, out / "timing.json")
    write_manifest(out, "bench-timing", cfg)
    for k, v in timing.items():
        log.info("%-16s %.3e s/image", k, v)
    return {"timing": timing}


def cmd_report(ws: Workspace, args) -> dict:
    from .report import build_report

    out = ws.out / "report"
    result = build_report(ws.out / "metrics", out, timing_path=ws.out / "timing" / "timing.json")
    write_manifest(out, "report", ws.cfg)
    print(result["markdown"])
    return {"dir": str(out), "rows": len(result["rows"])}


HANDLERS = {
    "train-victim": cmd_train_victim,
    "train-atn": cmd_train_atn,
    "train-uap": cmd_train_uap,
    "attack": cmd_attack,
    "eval-verification": cmd_eval_verification,
    "eval-identification": cmd_eval_identification,
    "bench-timing": cmd_bench_timing,
    "report": cmd_report,
}


def _read_spec(path: str) -> list:
    try:
        data = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as err:
        raise ConfigError(f"cannot read victim spec {path}: {err}") from err
    return data if isinstance(data, list) else [data]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", "-c", help="experiment YAML file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config field, e.g. --set attack.eps=0.02 (repeatable)")
    common.add_argument("--output-dir", help="shortcut for --set output_dir=...")
    common.add_argument("--threads", type=int, default=None, help="torch intra-op threads")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="advface", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-victim", parents=[common], help="train victim face-recognition models")
    p.add_argument("--only", help="member reference SET or SET#k (default: every configured victim)")
    p.add_argument("--force", action="store_true", help="retrain even if a checkpoint exists")
    p.add_argument("--spec", help="YAML file with one model set (or a list) replacing the victims section")

    for name in ("train-atn", "train-uap"):
        p = sub.add_parser(name, parents=[common], help=f"train the {name[6:].upper()} against attack.train_on")
        p.add_argument("--force", action="store_true")
        p.add_argument("--checkpoint-every", type=int, default=0)

    p = sub.add_parser("attack", parents=[common], help="write adversarial versions of the eval images")
    p.add_argument("--method", choices=METHODS)

    for name in ("eval-verification", "eval-identification"):
        p = sub.add_parser(name, parents=[common], help=f"{name[5:]} metrics on clean or attacked probes")
        p.add_argument("--method", choices=("none",) + METHODS, default="none",
                       help="attack applied on the fly (default: clean)")
        p.add_argument("--attacked-dir", help="read attacked probes from an `attack` output directory")
        p.add_argument("--provider", help="evaluate through a face API provider (e.g. mock)")

    p = sub.add_parser("bench-timing", parents=[common], help="per-image wall-clock of each attack")
    p.add_argument("--n-images", type=int, default=16)
    p.add_argument("--reps", type=int, default=3)

    sub.add_parser("report", parents=[common], help="aggregate metrics into tables and plots")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    if args.threads:
        torch.set_num_threads(args.threads)
    overrides = list(args.overrides)
    if args.output_dir:
        overrides.append(f"output_dir={args.output_dir}")
    try:
        if getattr(args, "spec", None):
            overrides.append("victims=" + json.dumps(_read_spec(args.spec)))
        cfg = load_config(args.config, overrides)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    try:
        result = HANDLERS[args.command](Workspace(cfg), args)
    except (CommandError, DatasetError, ConfigError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    log.info("%s done: %s", args.command, json.dumps(result, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
