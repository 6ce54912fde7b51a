"""``calpref`` command line: one subcommand per pipeline stage.

Artifacts live in ``--out`` (default ``runs/toy``)::

    pretrain        -> ref.ckpt, pretrain_loss.csv
    gen-candidates  -> candidates.jsonl
    calibrate       -> calibrated.jsonl
    select-pairs    -> pairs.jsonl
    finetune        -> finetuned.ckpt, runlog.csv
    sweep-beta      -> sweep/beta_<b>.ckpt, sweep/runlog_beta_<b>.csv, sweep.csv, sweep_best.ckpt
    merge CKPT...   -> merged.ckpt
    eval            -> eval.json
    report          -> report.csv, winrates.svg

Exit codes: 0 ok, 1 other pipeline error, 2 bad config, 3 missing or
mismatched artifact, 4 numerical divergence / non-convergence.
Log level comes from ``CALPREF_LOG`` (default INFO).
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
from pathlib import Path

from . import artifacts as art
from .config import RunConfig, load_config
from .diffmodel import DenoiserParams, load_checkpoint, save_checkpoint
from .errors import (CalprefError, ConfigInvalid, DivergenceDetected, LineageMismatch, MissingArtifact,
                     NonConvergence, SchemaVersionMismatch)
from .evalkit import EvalReport, emit_report, evaluate
from .pairing import select_all
from .reward import calibrate
from .soup import MergeSpec, merge
from .trainer import PretrainConfig, TrainConfig, finetune, generate_candidates, pretrain, sweep_beta

log = logging.getLogger("calpref")

EXIT_CODES = [
    (ConfigInvalid, 2),
    ((MissingArtifact, SchemaVersionMismatch, LineageMismatch), 3),
    ((DivergenceDetected, NonConvergence), 4),
]


class Ctx:
    def __init__(self, args):
        self.args = args
        self.cfg: RunConfig = load_config(args.config, args.seed)
        self.hash = self.cfg.config_hash()
        self.out = Path(args.out)
        self.force = args.force
        self.schedule = self.cfg.noise_schedule()
        self.bench = self.cfg.benchmark_obj()

    def path(self, name: str) -> Path:
        return self.out / name

    def lineage(self):
        return None if self.force else self.hash

    def load_ref(self) -> DenoiserParams:
        p = Path(self.args.ref) if getattr(self.args, "ref", None) else self.path("ref.ckpt")
        return load_checkpoint(art.require(p), role="reference")

    def save(self, name_or_path, params: DenoiserParams, ref: DenoiserParams | None = None) -> Path:
        header = {"config_hash": self.hash}
        if ref is not None:
            header["ref_digest"] = ref.digest()
        path = name_or_path if isinstance(name_or_path, Path) else self.path(name_or_path)
        return save_checkpoint(path, params, **header)

    def train_config(self, beta=None) -> TrainConfig:
        t = self.cfg.train
        return TrainConfig(objective=t.objective, strategy=t.strategy, reward_index=t.reward_index,
                           beta=t.beta if beta is None else beta, weighting=self.cfg.weighting_spec(),
                           lr=t.lr, warmup_steps=t.warmup_steps, batch_size=t.batch_size,
                           max_steps=t.max_steps, eval_every=t.eval_every, seed=self.cfg.seed,
                           val_samples=t.val_samples, val_seed=t.val_seed,
                           sampler_steps=self.cfg.sampler.steps, shift=self.cfg.sampler.shift)


# --- subcommands ------------------------------------------------------------------

def cmd_pretrain(ctx: Ctx):
    p = ctx.cfg.pretrain
    pcfg = PretrainConfig(lr=p.lr, warmup_steps=p.warmup_steps, batch_size=p.batch_size, max_steps=p.max_steps,
                          seed=ctx.cfg.seed, hidden=tuple(p.hidden), prompt_dim=p.prompt_dim,
                          energy_threshold=p.energy_threshold, eval_samples=p.eval_samples,
                          sampler_steps=ctx.cfg.sampler.steps, shift=ctx.cfg.sampler.shift,
                          final_lr_frac=p.final_lr_frac)
    res = pretrain(pcfg, ctx.bench, ctx.schedule)
    buf = io.StringIO()
    buf.write(f"# schema_version=1 config_hash={ctx.hash}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "loss"])
    for i, loss in enumerate(res.losses, 1):
        w.writerow([i, repr(float(loss))])
    art.atomic_write(ctx.path("pretrain_loss.csv"), buf.getvalue().encode())
    path = ctx.save("ref.ckpt", res.params.frozen())
    log.info("reference written to %s (energy distance %s)", path, res.energy)


def cmd_gen_candidates(ctx: Ctx):
    ref = ctx.load_ref()
    cands = generate_candidates(ref, ctx.bench, ctx.cfg.n_candidates, ctx.cfg.seed, ctx.schedule,
                                ctx.cfg.sampler.steps, ctx.cfg.sampler.shift)
    art.write_jsonl(ctx.path("candidates.jsonl"), (art.candidate_record(c) for c in cands), ctx.hash)
    log.info("%d candidate sets written", len(cands))


def cmd_calibrate(ctx: Ctx):
    recs = art.read_jsonl(ctx.path("candidates.jsonl"), ctx.lineage())
    w = ctx.cfg.ensemble_weights
    cals = [calibrate(art.candidate_from_record(r), w) for r in recs]
    art.write_jsonl(ctx.path("calibrated.jsonl"), (art.calibrated_record(c) for c in cals), ctx.hash)


def cmd_select_pairs(ctx: Ctx):
    cands = {r["prompt_id"]: r for r in art.read_jsonl(ctx.path("candidates.jsonl"), ctx.lineage())}
    cals = [art.calibrated_from_record(r) for r in art.read_jsonl(ctx.path("calibrated.jsonl"), ctx.lineage())]
    pools = select_all(cals, ctx.cfg.train.strategy, ctx.cfg.train.reward_index)
    art.write_jsonl(ctx.path("pairs.jsonl"),
                    (art.pool_record(p, cands[p.prompt_id]["samples"]) for p in pools), ctx.hash)
    log.info("%d pair pools (%d prompts dropped)", len(pools), len(cals) - len(pools))


def _training_inputs(ctx: Ctx):
    ref = ctx.load_ref()
    cands = [art.candidate_from_record(r) for r in art.read_jsonl(ctx.path("candidates.jsonl"), ctx.lineage())]
    pools = [art.pool_from_record(r) for r in art.read_jsonl(ctx.path("pairs.jsonl"), ctx.lineage())]
    return ref, cands, pools


def cmd_finetune(ctx: Ctx):
    ref, cands, pools = _training_inputs(ctx)
    params, runlog = finetune(ctx.train_config(), ref, pools, cands, ctx.bench, ctx.schedule)
    art.atomic_write(ctx.path("runlog.csv"), runlog.to_csv(ctx.hash).encode())
    ctx.save("finetuned.ckpt", params, ref)
    log.info("chosen step %d", runlog.chosen_step)


def cmd_sweep_beta(ctx: Ctx):
    ref, cands, pools = _training_inputs(ctx)
    (beta, best, _, score), runs = sweep_beta(ctx.train_config(), ctx.cfg.beta_sweep, ref, pools, cands,
                                             ctx.bench, ctx.schedule)
    buf = io.StringIO()
    buf.write(f"# schema_version=1 config_hash={ctx.hash} chosen_beta={beta!r}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["beta", "chosen_step", "val_mean"])
    for b, params, runlog, val in runs:
        ctx.save(ctx.path(f"sweep/beta_{b!r}.ckpt"), params, ref)
        art.atomic_write(ctx.path(f"sweep/runlog_beta_{b!r}.csv"), runlog.to_csv(ctx.hash).encode())
        w.writerow([repr(b), runlog.chosen_step, repr(val)])
    art.atomic_write(ctx.path("sweep.csv"), buf.getvalue().encode())
    ctx.save("sweep_best.ckpt", best, ref)
    log.info("best beta %r (validation mean win-rate %.4f)", beta, score)


def cmd_merge(ctx: Ctx):
    ref = ctx.load_ref()
    inputs = [load_checkpoint(art.require(Path(p))) for p in ctx.args.checkpoints]
    for p, params in zip(ctx.args.checkpoints, inputs):
        if not ctx.force and params.meta.get("ref_digest") not in (None, ref.digest()):
            raise LineageMismatch(f"{p} was not fine-tuned from this reference (use --force to override)")
    spec = MergeSpec("ref.ckpt", list(ctx.args.checkpoints), ctx.cfg.merge.method, ctx.cfg.merge.lam)
    merged = merge(spec, ref, inputs)
    out = Path(ctx.args.output) if ctx.args.output else ctx.path("merged.ckpt")
    ctx.save(out, merged, ref)
    log.info("merged %d checkpoints into %s", len(inputs), out)


def cmd_eval(ctx: Ctx):
    ref = ctx.load_ref()
    model_path = Path(ctx.args.model) if ctx.args.model else ctx.path("finetuned.ckpt")
    model = load_checkpoint(art.require(model_path))
    if not ctx.force:
        if model.meta.get("config_hash") != ctx.hash:
            raise LineageMismatch(f"{model_path} was produced under config {model.meta.get('config_hash')}, "
                                  f"current config is {ctx.hash} (use --force to override)")
        if model.meta.get("ref_digest") not in (None, ref.digest()):
            raise LineageMismatch(f"{model_path} was not fine-tuned from this reference")
    e = ctx.cfg.eval
    report = evaluate(model, ref, ctx.bench.prompts, e.k, ctx.bench.rewards, e.seed, ctx.schedule,
                      ctx.cfg.sampler.steps, ctx.cfg.sampler.shift, e.pooled, ctx.hash)
    report.extra = {"model": model_path.name}
    art.write_json(ctx.path("eval.json"), report.to_dict(), ctx.hash)
    for name, rate in zip(report.reward_names, report.win_rate):
        print(f"{name}\t{rate:.4f}")
    print(f"ensemble\t{report.ensemble_win_rate:.4f}")


def cmd_report(ctx: Ctx):
    rec = art.read_json(ctx.path("eval.json"), ctx.lineage())
    rec.pop("schema_version")
    report = EvalReport.from_dict(rec)
    for p in emit_report(report, ctx.out):
        log.info("wrote %s", p)


COMMANDS = {
    "pretrain": cmd_pretrain,
    "gen-candidates": cmd_gen_candidates,
    "calibrate": cmd_calibrate,
    "select-pairs": cmd_select_pairs,
    "finetune": cmd_finetune,
    "sweep-beta": cmd_sweep_beta,
    "merge": cmd_merge,
    "eval": cmd_eval,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run config (default: shipped toy config)")
    common.add_argument("--out", default="runs/toy", help="artifact directory")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--force", action="store_true", help="skip lineage checks")
    parser = argparse.ArgumentParser(prog="calpref", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name in ("gen-candidates", "finetune", "sweep-beta", "merge", "eval"):
            p.add_argument("--ref", help="reference checkpoint (default: OUT/ref.ckpt)")
        if name == "merge":
            p.add_argument("checkpoints", nargs="+", help="2 or 3 fine-tuned checkpoints")
            p.add_argument("--output", help="merged checkpoint path (default: OUT/merged.ckpt)")
        if name == "eval":
            p.add_argument("--model", help="checkpoint to evaluate (default: OUT/finetuned.ckpt)")
    return parser


def exit_code(exc: BaseException) -> int:
    for types, code in EXIT_CODES:
        if isinstance(exc, types):
            return code
    return 1


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("CALPREF_LOG", "INFO").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        ctx = Ctx(args)
        if args.command == "merge" and len(args.checkpoints) not in (2, 3):
            raise ConfigInvalid("merge takes 2 or 3 checkpoints")
        COMMANDS[args.command](ctx)
    except CalprefError as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return exit_code(exc)
    return 0


if __name__ == "__main__":
    sys.exit(main())
