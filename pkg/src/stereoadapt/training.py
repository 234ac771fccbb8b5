"""Two-stage training schedule and the alternating D/G/F optimization.

Stage 1 warms up the translation networks (adversarial + cycle + synthetic
feature re-projection); stage 2 warms up the matcher on translated source
pairs; the joint stage alternates one discriminator ascent step, one
generator step, and one matcher step per iteration.

Every iteration consumes one synthetic paired tuple and one real unpaired
pair; domain expectations are estimated from both images of each.  All
randomness flows from the run seed through named sub-streams (init, data,
noise), so two runs with the same seed produce identical loss logs and a
mid-run resume continues bit-exactly.
"""

import hashlib
import itertools
import json
import math
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig, config_from_dict
from contextlib import contextmanager

from .data import PairedSampler, StereoDataset, load_manifest
from .errors import CheckpointError, NonFiniteValueError, NumericalAbortError, StartupError
from .geometry import FeatureMap
from .losses import (
    adversarial_loss,
    correlation_consistency_loss,
    cycle_loss,
    feature_reprojection_real,
    feature_reprojection_synthetic,
    full_objective,
    mode_seeking_loss,
    stereo_matching_loss,
)
from .networks import (
    PatchDiscriminator,
    StereoMatcher,
    TranslationGenerator,
    make_noise,
)

STATE_VERSION = 1
PHASES = ("warmup_translation", "warmup_stereo", "joint")


def substream_seed(base_seed: int, name: str) -> int:
    """Stable, platform-independent derivation of named RNG sub-streams."""
    digest = hashlib.sha256(f"{base_seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def disparity_predictor(matcher):
    """Deployment-protocol predictor: full-resolution disparity from a raw pair."""

    def predict(left, right):
        with torch.no_grad():
            return matcher(left, right).disparities[0]

    return predict


def _detach_features(features):
    return [FeatureMap(f.data.detach(), f.scale) for f in features]


class Trainer:
    """Owns the five networks, their optimizers, and the staged schedule."""

    def __init__(self, config: RunConfig, run_dir=None):
        config.validate()
        self.config = config
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.log_path = None
        if self.run_dir is not None:
            (self.run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
            (self.run_dir / "logs").mkdir(parents=True, exist_ok=True)
            self.log_path = self.run_dir / "logs" / "train.jsonl"

        self._load_datasets()

        torch.manual_seed(substream_seed(config.seed, "init") % (2**31 - 1))
        gen_spec = config.generator
        self.g_syn2real = TranslationGenerator(
            type(gen_spec)(**{**asdict(gen_spec), "accepts_noise": True})
        )
        self.g_real2syn = TranslationGenerator(
            type(gen_spec)(**{**asdict(gen_spec), "accepts_noise": False})
        )
        self.d_syn = PatchDiscriminator(config.discriminator)
        self.d_real = PatchDiscriminator(config.discriminator)
        self.matcher = StereoMatcher(config.matcher)
        self.nets = {
            "g_syn2real": self.g_syn2real,
            "g_real2syn": self.g_real2syn,
            "d_syn": self.d_syn,
            "d_real": self.d_real,
            "matcher": self.matcher,
        }

        t_opt, s_opt = config.translation_optimizer, config.stereo_optimizer
        self.opt_g = torch.optim.Adam(
            itertools.chain(self.g_syn2real.parameters(), self.g_real2syn.parameters()),
            lr=t_opt.learning_rate, betas=(t_opt.beta1, t_opt.beta2),
        )
        self.opt_d = torch.optim.Adam(
            itertools.chain(self.d_syn.parameters(), self.d_real.parameters()),
            lr=t_opt.learning_rate, betas=(t_opt.beta1, t_opt.beta2),
        )
        self.opt_f = torch.optim.Adam(
            self.matcher.parameters(), lr=s_opt.learning_rate, betas=(s_opt.beta1, s_opt.beta2)
        )

        self.rng_data = np.random.default_rng(substream_seed(config.seed, "data"))
        self.rng_noise = np.random.default_rng(substream_seed(config.seed, "noise"))
        self.steps_done = {phase: 0 for phase in PHASES}
        self.stage_done = {phase: False for phase in PHASES}
        self.weights = config.effective_weights(
            ms_decay_steps=max(1, config.joint_epochs * self.steps_per_epoch)
        )
        self.records = []
        self.on_substep = None  # optional hook: fn(substep_name, "before"|"after")

    # -- data ---------------------------------------------------------------

    def _load_datasets(self):
        cfg = self.config
        if not cfg.synthetic_manifest or not cfg.real_manifest:
            raise StartupError("config must name both dataset manifests")
        self.synthetic = StereoDataset(load_manifest(cfg.synthetic_manifest))
        self.real = StereoDataset(load_manifest(cfg.real_manifest))
        if len(self.synthetic) == 0 or len(self.real) == 0:
            raise StartupError("training datasets must be non-empty")
        if self.synthetic.manifest.domain != "synthetic":
            raise StartupError("synthetic_manifest must be tagged domain=synthetic")
        if self.real.manifest.domain != "real":
            raise StartupError("real_manifest must be tagged domain=real")

    @property
    def steps_per_epoch(self):
        return len(self.synthetic)

    def _samplers(self):
        return PairedSampler(self.synthetic, self.rng_data), PairedSampler(self.real, self.rng_data)

    def _noise(self, height, width):
        return make_noise(int(self.rng_noise.integers(0, 2**31 - 1)), height, width)

    # -- logging ------------------------------------------------------------

    def _log(self, phase, step, terms, total, extras=None):
        def scalar(v):
            return float(v.detach()) if torch.is_tensor(v) else float(v)

        record = {
            "phase": phase,
            "step": step,
            "epoch": step // self.steps_per_epoch,
            "terms": {k: scalar(v) for k, v in terms.items()},
            "total": scalar(total),
        }
        if self.config.ablate:
            record["ablate"] = list(self.config.ablate)
        if extras:
            record.update(extras)
        record["wall_time"] = time.time()
        self.records.append(record)
        if self.log_path is not None:
            with open(self.log_path, "a") as f:
                f.write(json.dumps(record) + "\n")
        if any(not math.isfinite(v) for v in record["terms"].values()) or not math.isfinite(
            record["total"]
        ):
            raise NonFiniteValueError(f"loss terms {record['terms']}")

    @contextmanager
    def _numerical_guard(self, phase):
        """Abort (never silently skip) when anything in an iteration went
        non-finite, leaving a diagnostic checkpoint behind."""
        try:
            yield
        except NonFiniteValueError as exc:
            if self.run_dir is not None:
                self.checkpoint(self.run_dir / "checkpoints" / "abort_diagnostic.pt")
            raise NumericalAbortError(
                f"non-finite values during {phase} step {self.steps_done[phase]}: {exc}"
            ) from exc

    def _hook(self, name, when):
        if self.on_substep is not None:
            self.on_substep(name, when)

    # -- shared step pieces ---------------------------------------------------

    def _translate_synthetic(self, syn, with_grad=True):
        _, h, w = syn.left.shape
        z_l, z_r = self._noise(h, w), self._noise(h, w)
        ctx = torch.enable_grad() if with_grad else torch.no_grad()
        with ctx:
            tx_l = self.g_syn2real(syn.left, z_l)
            tx_r = self.g_syn2real(syn.right, z_r)
        return tx_l, tx_r, z_l, z_r

    def _adversarial_d(self, real_left, real_right, fake_left, fake_right, disc):
        mode = self.config.adversarial_mode
        val = 0.5 * (
            adversarial_loss(disc(real_left), disc(fake_left.detach()), "discriminator", mode)
            + adversarial_loss(disc(real_right), disc(fake_right.detach()), "discriminator", mode)
        )
        return val

    def _adversarial_g(self, fake_left, fake_right, disc):
        mode = self.config.adversarial_mode
        return 0.5 * (
            adversarial_loss(None, disc(fake_left), "generator", mode)
            + adversarial_loss(None, disc(fake_right), "generator", mode)
        )

    def _d_step(self, syn, real, tx_l, tx_r, ty_l, ty_r):
        self._hook("d", "before")
        self.opt_d.zero_grad()
        d_real_val = self._adversarial_d(real.left, real.right, tx_l.image, tx_r.image, self.d_real)
        d_syn_val = self._adversarial_d(syn.left, syn.right, ty_l.image, ty_r.image, self.d_syn)
        (-(d_real_val + d_syn_val)).backward()
        self.opt_d.step()
        self._hook("d", "after")
        return float(d_real_val.detach()), float(d_syn_val.detach())

    def _generator_terms(self, syn, real, tx_l, tx_r, back_l, back_r, ty_l, ty_r, ycyc_l, ycyc_r):
        adv_g = 0.5 * (
            self._adversarial_g(tx_l.image, tx_r.image, self.d_real)
            + self._adversarial_g(ty_l.image, ty_r.image, self.d_syn)
        )
        cyc = 0.5 * (
            cycle_loss(syn.left, back_l.image, real.left, ycyc_l.image)
            + cycle_loss(syn.right, back_r.image, real.right, ycyc_r.image)
        )
        cdt = adv_g + self.weights.lambda_cyc * cyc
        if "fx" in self.config.ablate:
            fx = torch.zeros(())
        else:
            fx = feature_reprojection_synthetic(
                tx_l.features, tx_r.features, back_l.features, back_r.features, syn.disparity
            )
        return adv_g, cyc, cdt, fx

    def _clip_and_step(self, params, optimizer):
        torch.nn.utils.clip_grad_norm_(params, self.config.grad_clip_norm)
        optimizer.step()

    def _gen_params(self):
        return list(self.g_syn2real.parameters()) + list(self.g_real2syn.parameters())

    # -- stage 1: translation warm-up ----------------------------------------

    def warmup_translation(self, epochs=None, max_steps=None):
        """Alternating D/G updates with the cycle-consistency objective plus
        the synthetic feature re-projection term; the matcher is untouched."""
        with self._numerical_guard("warmup_translation"):
            return self._warmup_translation(epochs, max_steps)

    def _warmup_translation(self, epochs=None, max_steps=None):
        cfg = self.config
        epochs = cfg.warmup_translation_epochs if epochs is None else epochs
        paired_syn, paired_real = self._samplers()
        total = epochs * self.steps_per_epoch
        phase = "warmup_translation"
        start = self.steps_done[phase]
        stop = total if max_steps is None else min(total, start + max_steps)
        for step in range(start, stop):
            syn = paired_syn.draw()
            real = paired_real.draw()
            tx_l, tx_r, _, _ = self._translate_synthetic(syn)
            back_l = self.g_real2syn(tx_l.image)
            back_r = self.g_real2syn(tx_r.image)
            ty_l = self.g_real2syn(real.left)
            ty_r = self.g_real2syn(real.right)
            _, h, w = real.left.shape
            ycyc_l = self.g_syn2real(ty_l.image, self._noise(h, w))
            ycyc_r = self.g_syn2real(ty_r.image, self._noise(h, w))

            adv_d_real, adv_d_syn = self._d_step(syn, real, tx_l, tx_r, ty_l, ty_r)

            self._hook("g", "before")
            self.opt_g.zero_grad()
            adv_g, cyc, cdt, fx = self._generator_terms(
                syn, real, tx_l, tx_r, back_l, back_r, ty_l, ty_r, ycyc_l, ycyc_r
            )
            loss = cdt + self.weights.lambda_fx * fx
            loss.backward()
            self._clip_and_step(self._gen_params(), self.opt_g)
            self._hook("g", "after")

            self.steps_done[phase] = step + 1
            self._log(
                phase, step,
                {"adv_g": adv_g, "cyc": cyc, "cdt": cdt, "fx": fx,
                 "adv_d_real": adv_d_real, "adv_d_syn": adv_d_syn},
                loss,
            )
            self._maybe_checkpoint(phase, step)
        if self.steps_done[phase] >= total:
            self.stage_done[phase] = True
        return self

    # -- stage 2: matcher warm-up ---------------------------------------------

    def warmup_stereo(self, epochs=None, max_steps=None):
        """Train the matcher on translated source pairs against the source
        ground truth (translation networks frozen).  With
        translate_source=False the matcher trains on raw source pairs (the
        no-adaptation reference protocol)."""
        with self._numerical_guard("warmup_stereo"):
            return self._warmup_stereo(epochs, max_steps)

    def _warmup_stereo(self, epochs=None, max_steps=None):
        cfg = self.config
        if cfg.translate_source and not self.stage_done["warmup_translation"]:
            raise StartupError("warmup_stereo requires completed translation warm-up "
                               "(run warmup_translation or resume from its checkpoint)")
        epochs = cfg.warmup_stereo_epochs if epochs is None else epochs
        paired_syn, _ = self._samplers()
        total = epochs * self.steps_per_epoch
        phase = "warmup_stereo"
        start = self.steps_done[phase]
        stop = total if max_steps is None else min(total, start + max_steps)
        for step in range(start, stop):
            syn = paired_syn.draw()
            if cfg.translate_source:
                tx_l, tx_r, _, _ = self._translate_synthetic(syn, with_grad=False)
                left, right = tx_l.image, tx_r.image
            else:
                left, right = syn.left, syn.right

            self._hook("f", "before")
            self.opt_f.zero_grad()
            out = self.matcher(left, right)
            sm = stereo_matching_loss(out, syn.disparity)
            loss = self.weights.lambda_sm * sm
            loss.backward()
            self._clip_and_step(self.matcher.parameters(), self.opt_f)
            self._hook("f", "after")

            self.steps_done[phase] = step + 1
            self._log(phase, step, {"sm": sm}, loss)
            self._maybe_checkpoint(phase, step)
        if self.steps_done[phase] >= total:
            self.stage_done[phase] = True
        return self

    # -- stage 3: joint alternation ---------------------------------------------

    def joint_train(self, epochs=None, max_steps=None):
        """Per iteration: discriminator ascent, generator step (adversarial,
        cycle, synthetic re-projection, correlation consistency, decayed mode
        seeking), then matcher step (matching + real re-projection)."""
        with self._numerical_guard("joint"):
            return self._joint_train(epochs, max_steps)

    def _joint_train(self, epochs=None, max_steps=None):
        cfg = self.config
        if not (self.stage_done["warmup_translation"] and self.stage_done["warmup_stereo"]):
            raise StartupError("joint training requires both warm-up stages")
        epochs = cfg.joint_epochs if epochs is None else epochs
        paired_syn, paired_real = self._samplers()
        total = epochs * self.steps_per_epoch
        phase = "joint"
        start = self.steps_done[phase]
        stop = total if max_steps is None else min(total, start + max_steps)
        for step in range(start, stop):
            syn = paired_syn.draw()
            real = paired_real.draw()
            _, h, w = syn.left.shape

            tx_l, tx_r, z_l, _ = self._translate_synthetic(syn)
            back_l = self.g_real2syn(tx_l.image)
            back_r = self.g_real2syn(tx_r.image)
            ty_l = self.g_real2syn(real.left)
            ty_r = self.g_real2syn(real.right)
            ycyc_l = self.g_syn2real(ty_l.image, self._noise(real.left.shape[1], real.left.shape[2]))
            ycyc_r = self.g_syn2real(ty_r.image, self._noise(real.left.shape[1], real.left.shape[2]))

            adv_d_real, adv_d_syn = self._d_step(syn, real, tx_l, tx_r, ty_l, ty_r)

            # generator step
            self._hook("g", "before")
            self.opt_g.zero_grad()
            adv_g, cyc, cdt, fx = self._generator_terms(
                syn, real, tx_l, tx_r, back_l, back_r, ty_l, ty_r, ycyc_l, ycyc_r
            )
            if "corr" in cfg.ablate:
                corr = torch.zeros(())
            else:
                with torch.no_grad():
                    ref = self.matcher(real.left, real.right)
                corr = correlation_consistency_loss(
                    ref.correlation_features,
                    self.matcher(ycyc_l.image, real.right).correlation_features,
                    self.matcher(real.left, ycyc_r.image).correlation_features,
                    self.matcher(ycyc_l.image, ycyc_r.image).correlation_features,
                )
            lam_ms = self.weights.lambda_ms_at(step)
            if "ms" in cfg.ablate or self.weights.lambda_ms == 0.0:
                ms = torch.zeros(())
            else:
                z_b = self._noise(h, w)
                alt = self.g_syn2real(syn.left, z_b)
                ms = mode_seeking_loss(tx_l.image, alt.image, z_l, z_b)
            g_loss = (
                cdt
                + self.weights.lambda_fx * fx
                + self.weights.lambda_corr * corr
                + lam_ms * ms
            )
            if cfg.fy_to_generators:
                with torch.no_grad():
                    est_detached = self.matcher(real.left, real.right)
                g_loss = g_loss + self.weights.lambda_fy * feature_reprojection_real(
                    ty_l.features, ty_r.features, ycyc_l.features, ycyc_r.features, est_detached
                )
            g_loss.backward()
            self._clip_and_step(self._gen_params(), self.opt_g)
            self._hook("g", "after")

            # matcher step
            self._hook("f", "before")
            self.opt_f.zero_grad()
            out_syn = self.matcher(tx_l.image.detach(), tx_r.image.detach())
            sm = stereo_matching_loss(out_syn, syn.disparity)
            if "fy" in cfg.ablate:
                fy = torch.zeros(())
            else:
                est = self.matcher(real.left, real.right)
                fy = feature_reprojection_real(
                    _detach_features(ty_l.features), _detach_features(ty_r.features),
                    _detach_features(ycyc_l.features), _detach_features(ycyc_r.features),
                    est,
                )
            f_loss = self.weights.lambda_sm * sm + self.weights.lambda_fy * fy
            f_loss.backward()
            self._clip_and_step(self.matcher.parameters(), self.opt_f)
            self._hook("f", "after")

            self.steps_done[phase] = step + 1
            report = full_objective(
                {"cdt": cdt, "sm": sm, "fx": fx, "fy": fy, "corr": corr, "ms": ms},
                self.weights, step,
            )
            self._log(
                phase, step, report.terms, report.total,
                extras={
                    "lambda_ms": report.lambda_ms_effective,
                    "adv_d_real": adv_d_real,
                    "adv_d_syn": adv_d_syn,
                },
            )
            self._maybe_checkpoint(phase, step)
        if self.steps_done[phase] >= total:
            self.stage_done[phase] = True
        return self

    # -- checkpointing ----------------------------------------------------------

    def _maybe_checkpoint(self, phase, step):
        if self.run_dir is None:
            return
        every = self.config.checkpoint_every_epochs * self.steps_per_epoch
        if every > 0 and (step + 1) % every == 0:
            self.checkpoint(self.run_dir / "checkpoints" / "latest.pt")

    def checkpoint(self, path) -> None:
        payload = {
            "format_version": STATE_VERSION,
            "kind": "training_state",
            "config": self.config.to_dict(),
            "steps_done": dict(self.steps_done),
            "stage_done": dict(self.stage_done),
            "nets": {name: net.state_dict() for name, net in self.nets.items()},
            "optims": {
                "g": self.opt_g.state_dict(),
                "d": self.opt_d.state_dict(),
                "f": self.opt_f.state_dict(),
            },
            "rngs": {
                "data": self.rng_data.bit_generator.state,
                "noise": self.rng_noise.bit_generator.state,
            },
            "torch_rng": torch.get_rng_state(),
        }
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(payload, path)

    @classmethod
    def resume(cls, path, run_dir=None) -> "Trainer":
        path = Path(path)
        if not path.exists():
            raise CheckpointError(f"checkpoint not found: {path}")
        try:
            payload = torch.load(path, map_location="cpu", weights_only=False)
        except Exception as exc:
            raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
        if not isinstance(payload, dict) or payload.get("kind") != "training_state":
            raise CheckpointError(f"{path} is not a training checkpoint")
        if payload["format_version"] != STATE_VERSION:
            raise CheckpointError(
                f"{path}: format version {payload['format_version']} != {STATE_VERSION}"
            )
        trainer = cls(config_from_dict(payload["config"]), run_dir=run_dir)
        for name, net in trainer.nets.items():
            net.load_state_dict(payload["nets"][name])
        trainer.opt_g.load_state_dict(payload["optims"]["g"])
        trainer.opt_d.load_state_dict(payload["optims"]["d"])
        trainer.opt_f.load_state_dict(payload["optims"]["f"])
        trainer.rng_data.bit_generator.state = payload["rngs"]["data"]
        trainer.rng_noise.bit_generator.state = payload["rngs"]["noise"]
        torch.set_rng_state(payload["torch_rng"])
        trainer.steps_done = dict(payload["steps_done"])
        trainer.stage_done = dict(payload["stage_done"])
        return trainer

    # -- orchestration ------------------------------------------------------------

    def run_stage(self, stage: str):
        if stage == "warmup-translation":
            self.warmup_translation()
        elif stage == "warmup-stereo":
            self.warmup_stereo()
        elif stage == "joint":
            self.joint_train()
        elif stage == "all":
            self.warmup_translation()
            self.warmup_stereo()
            self.joint_train()
        else:
            raise StartupError(f"unknown stage {stage!r}")
        return self
