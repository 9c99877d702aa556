"""Multi-round session engine: prompt refinement, cross-round generation
with noise re-injection, transcript recording, and simulated-user runs.

A session's round combines the previous round's latent with fresh noise:
the stored latent is noised to tau1, denoised under the previous round's
condition, re-noised to tau2, and denoised again under the current round's
condition. Stepping inside rounds is deterministic, so round-to-round
differences come from prompts and adapters rather than sampler noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Protocol

import numpy as np

from .autodiff import Tensor, no_grad
from .diffusion import DenoiserModel, NoiseSchedule, denoise_from, extract_features, forward_diffuse
from .lora import AdapterSet
from .preference import PreferenceModel
from .preference import score as pref_score
from .rewards import RewardBreakdown, consistency, diversity, total
from .world import AttributeTuple, Feedback, SimulatedUser, quantize, dequantize


class DialogueError(ValueError):
    pass


@dataclass(frozen=True)
class RoundCondition:
    """Per-round conditioning context: prompt embedding plus round encoding."""

    round_index: int
    vector: np.ndarray

    def tensor(self) -> Tensor:
        return Tensor(self.vector)


@dataclass
class PromptState:
    current: AttributeTuple
    history: list[tuple[Feedback, AttributeTuple]] = field(default_factory=list)

    def advance(self, feedback: Feedback, new_prompt: AttributeTuple) -> "PromptState":
        return PromptState(current=new_prompt,
                           history=self.history + [(feedback, new_prompt)])


class PromptRefiner(Protocol):
    def refine(self, state: PromptState, feedback: Feedback) -> AttributeTuple: ...


class RuleRefiner:
    """Default refiner: corrections override one field, free text is kept
    verbatim but does not change the tuple, accept/reject leave it alone."""

    def refine(self, state: PromptState, feedback: Feedback) -> AttributeTuple:
        if feedback.kind == "attribute-correction":
            return state.current.replace(feedback.field, feedback.value)
        return state.current


def refine_prompt(refiner: PromptRefiner, state: PromptState,
                  feedback: Feedback) -> PromptState:
    """Apply feedback; the refiner must return a valid attribute tuple."""
    new_prompt = refiner.refine(state, feedback)
    if not isinstance(new_prompt, AttributeTuple):
        raise DialogueError("refiner returned a non-tuple prompt")
    return state.advance(feedback, new_prompt)


def embed_prompt(model: DenoiserModel, prompt: AttributeTuple,
                 round_index: int) -> tuple[Tensor, RoundCondition]:
    """Deterministic prompt embedding and its round condition."""
    with no_grad():
        psi = model.embed_prompt(prompt, round_index)
    return psi, RoundCondition(round_index=round_index, vector=psi.data.copy())


@dataclass
class RoundRecord:
    index: int
    prompt: AttributeTuple
    image: np.ndarray
    alt_image: Optional[np.ndarray]
    latent: np.ndarray
    features: np.ndarray
    rewards: RewardBreakdown
    tau1: Optional[int]
    tau2: Optional[int]
    feedback: Optional[Feedback] = None
    ab_choice: Optional[str] = None

    def to_dict(self) -> dict:
        d = {
            "index": self.index,
            "prompt": self.prompt.to_dict(),
            "image": encode_image(self.image),
            "alt_image": encode_image(self.alt_image) if self.alt_image is not None else None,
            "latent": self.latent.tolist(),
            "tau1": self.tau1,
            "tau2": self.tau2,
            "rewards": self.rewards.as_dict(),
            "feedback": self.feedback.to_dict() if self.feedback else None,
            "ab_choice": self.ab_choice,
        }
        return d


def encode_image(img: np.ndarray) -> list:
    """Quantized pixel grid as nested lists (transcript-friendly)."""
    return quantize(img).tolist()


def decode_image(data: list) -> np.ndarray:
    return dequantize(np.asarray(data, dtype=np.uint8))


@dataclass
class DialogueSession:
    session_id: str
    seed: int
    initial_prompt: AttributeTuple
    status: str = "active"  # active | accepted | abandoned
    rounds: list[RoundRecord] = field(default_factory=list)
    free_text: list[str] = field(default_factory=list)

    def prompt_state(self) -> PromptState:
        state = PromptState(current=self.initial_prompt)
        for r in self.rounds:
            if r.feedback is not None:
                state = refine_prompt(RuleRefiner(), state, r.feedback)
        return state

    def close(self, status: str) -> None:
        if self.status != "active":
            raise DialogueError(f"session already {self.status}")
        if status not in ("accepted", "abandoned"):
            raise DialogueError(f"invalid terminal status {status!r}")
        self.status = status

    def to_dict(self) -> dict:
        return {
            "session_id": self.session_id,
            "seed": self.seed,
            "initial_prompt": self.initial_prompt.to_dict(),
            "status": self.status,
            "free_text": list(self.free_text),
            "rounds": [r.to_dict() for r in self.rounds],
        }

    @staticmethod
    def from_dict(d: dict) -> "DialogueSession":
        sess = DialogueSession(
            session_id=d["session_id"],
            seed=int(d["seed"]),
            initial_prompt=AttributeTuple.from_dict(d["initial_prompt"]),
            status=d["status"],
            free_text=list(d.get("free_text", [])),
        )
        for r in d["rounds"]:
            sess.rounds.append(RoundRecord(
                index=r["index"],
                prompt=AttributeTuple.from_dict(r["prompt"]),
                image=decode_image(r["image"]),
                alt_image=decode_image(r["alt_image"]) if r.get("alt_image") else None,
                latent=np.asarray(r["latent"], dtype=np.float64),
                features=np.zeros(0),
                rewards=RewardBreakdown.from_dict(r["rewards"]),
                tau1=r.get("tau1"),
                tau2=r.get("tau2"),
                feedback=Feedback.from_dict(r["feedback"]) if r.get("feedback") else None,
                ab_choice=r.get("ab_choice"),
            ))
        return sess


@dataclass
class GenerationSettings:
    tau1: int = 60
    tau2: int = 40
    tau_jitter: int = 5

    def validate(self, steps: int) -> None:
        if not (1 <= self.tau2 < self.tau1 <= steps):
            raise DialogueError(
                f"need 1 <= tau2 < tau1 <= {steps}, got ({self.tau1}, {self.tau2})")
        if self.tau_jitter < 0:
            raise DialogueError("tau jitter must be non-negative")


class DiffusionGenerator:
    """Round image generator backed by the latent diffusion model."""

    def __init__(self, model: DenoiserModel, schedule: NoiseSchedule,
                 adapters: Optional[AdapterSet] = None,
                 settings: GenerationSettings | None = None):
        self.model = model
        self.schedule = schedule
        self.adapters = adapters
        self.settings = settings or GenerationSettings()
        self.settings.validate(schedule.steps)

    def _round_rng(self, session: DialogueSession, round_index: int,
                   stream: int) -> np.random.Generator:
        return np.random.default_rng([session.seed, round_index, stream])

    def taus(self, session: DialogueSession, round_index: int) -> tuple[int, int]:
        s = self.settings
        rng = self._round_rng(session, round_index, 2)
        j1 = int(rng.integers(-s.tau_jitter, s.tau_jitter + 1))
        j2 = int(rng.integers(-s.tau_jitter, s.tau_jitter + 1))
        tau1 = int(np.clip(s.tau1 + j1, 2, self.schedule.steps))
        tau2 = int(np.clip(s.tau2 + j2, 1, tau1 - 1))
        return tau1, tau2

    def first_round(self, session: DialogueSession, prompt: AttributeTuple,
                    stream: int = 0):
        # round 1 samples from pure noise; the stochastic sampler is seeded
        # by (session seed, round, stream), so replay stays bit-identical
        rng = self._round_rng(session, 1, stream)
        psi, _ = embed_prompt(self.model, prompt, 1)
        c = self.model.config.latent_channels
        with no_grad():
            z = Tensor(rng.standard_normal((1, 4, 4, c)))
            z = denoise_from(self.model, z, psi, self.schedule.steps, 0,
                             self.schedule, self.adapters, stochastic=True, rng=rng)
            img = self.model.decode(z)
        return z.data[0].copy(), img.data[0].copy(), (None, None)

    def next_round(self, session: DialogueSession, prompt: AttributeTuple,
                   round_index: int, prev_latent: np.ndarray, prev_round_index: int,
                   prev_prompt: AttributeTuple, stream: int = 0):
        # noise draws are seeded per (session, round, stream): replays are
        # bit-identical, and different model variants on the same seed see
        # the same noise sequence, so differences stay attributable to
        # prompts and adapters
        tau1, tau2 = self.taus(session, round_index)
        rng = self._round_rng(session, round_index, stream)
        psi_prev, _ = embed_prompt(self.model, prev_prompt, prev_round_index)
        psi_cur, _ = embed_prompt(self.model, prompt, round_index)
        with no_grad():
            z_prev = Tensor(prev_latent[None])
            z_tau1 = forward_diffuse(z_prev, tau1,
                                     Tensor(rng.standard_normal(z_prev.shape)),
                                     self.schedule)
            z_mid = denoise_from(self.model, z_tau1, psi_prev, tau1, 0,
                                 self.schedule, self.adapters,
                                 stochastic=True, rng=rng)
            z_tau2 = forward_diffuse(z_mid, tau2,
                                     Tensor(rng.standard_normal(z_mid.shape)),
                                     self.schedule)
            z_out = denoise_from(self.model, z_tau2, psi_cur, tau2, 0,
                                 self.schedule, self.adapters,
                                 stochastic=True, rng=rng)
            img = self.model.decode(z_out)
        return z_out.data[0].copy(), img.data[0].copy(), (tau1, tau2)

    def features_of(self, latent: np.ndarray) -> np.ndarray:
        with no_grad():
            return extract_features(self.model, Tensor(latent)).data.copy()


class RenderGenerator:
    """Oracle generator that renders the prompt exactly (for tests)."""

    def first_round(self, session, prompt, stream: int = 0):
        from .world import render

        img = render(prompt)
        z = np.zeros((4, 4, 1))
        return z, img, (None, None)

    def next_round(self, session, prompt, round_index, prev_latent,
                   prev_round_index, prev_prompt, stream: int = 0):
        z, img, _ = self.first_round(session, prompt, stream)
        return z, img, (None, None)

    def features_of(self, latent: np.ndarray) -> np.ndarray:
        v = np.ones(4)
        return v / np.linalg.norm(v)


def next_round(session: DialogueSession, generator, prompt: AttributeTuple,
               pref_model: Optional[PreferenceModel] = None,
               with_alternative: bool = True) -> RoundRecord:
    """Generate the next round's image(s), score it, append to the session.

    Round 1 samples from pure noise; later rounds re-inject noise into the
    previous round's latent. An alternative candidate (perturbed stream)
    is generated for A/B preference collection.
    """
    if session.status != "active":
        raise DialogueError(f"session {session.session_id} is {session.status}")
    t = len(session.rounds) + 1
    if t == 1:
        latent, img, taus = generator.first_round(session, prompt, stream=0)
        alt = (generator.first_round(session, prompt, stream=1)[1]
               if with_alternative else None)
    else:
        prev = session.rounds[-1]
        latent, img, taus = generator.next_round(
            session, prompt, t, prev.latent, prev.index, prev.prompt, stream=0)
        alt = (generator.next_round(session, prompt, t, prev.latent, prev.index,
                                    prev.prompt, stream=1)[1]
               if with_alternative else None)

    feats = generator.features_of(latent)
    if alt is not None and hasattr(generator, "model"):
        with no_grad():
            alt_latent = generator.model.encode(Tensor(alt[None])).data[0]
        alt_feats = generator.features_of(alt_latent)
        r_div = float(diversity([feats, alt_feats]).item())
    else:
        r_div = 0.0
    if session.rounds and session.rounds[-1].features.size:
        r_cons = float(consistency([session.rounds[-1].features, feats]).item())
    else:
        r_cons = 0.0
    r_mi = pref_score(pref_model, prompt, img) if pref_model is not None else 0.0
    breakdown = total(t, r_div, r_cons, r_mi)

    record = RoundRecord(index=t, prompt=prompt, image=img, alt_image=alt,
                         latent=latent, features=feats, rewards=breakdown,
                         tau1=taus[0], tau2=taus[1])
    session.rounds.append(record)
    return record


def hydrate_features(session: DialogueSession, generator) -> None:
    """Recompute per-round features from stored latents after a reload."""
    for r in session.rounds:
        if r.features.size == 0:
            r.features = generator.features_of(r.latent)


def replay_session(session: DialogueSession, generator,
                   pref_model: Optional[PreferenceModel] = None) -> DialogueSession:
    """Regenerate a recorded session from its seed and feedback history."""
    out = DialogueSession(session_id=session.session_id, seed=session.seed,
                          initial_prompt=session.initial_prompt)
    state = PromptState(current=session.initial_prompt)
    for original in session.rounds:
        record = next_round(out, generator, state.current, pref_model,
                            with_alternative=original.alt_image is not None)
        record.feedback = original.feedback
        record.ab_choice = original.ab_choice
        if original.feedback is not None and original.feedback.kind != "accept":
            state = refine_prompt(RuleRefiner(), state, original.feedback)
    out.status = session.status
    return out


@dataclass
class SessionResult:
    session: DialogueSession
    rounds_to_accept: Optional[int]

    @property
    def accepted(self) -> bool:
        return self.rounds_to_accept is not None


def run_session(user: SimulatedUser, initial_prompt: AttributeTuple,
                max_rounds: int, generator, session_id: str = "sim", seed: int = 0,
                pref_model: Optional[PreferenceModel] = None,
                refiner: Optional[PromptRefiner] = None,
                with_alternative: bool = False) -> SessionResult:
    """Generate/feedback/refine loop until acceptance or the round budget."""
    if max_rounds < 1:
        raise DialogueError("max_rounds must be >= 1")
    refiner = refiner or RuleRefiner()
    session = DialogueSession(session_id=session_id, seed=seed,
                              initial_prompt=initial_prompt)
    state = PromptState(current=initial_prompt)
    for t in range(1, max_rounds + 1):
        record = next_round(session, generator, state.current, pref_model,
                            with_alternative=with_alternative)
        fb = user.feedback(record.image)
        record.feedback = fb
        if fb.kind == "accept":
            session.close("accepted")
            return SessionResult(session=session, rounds_to_accept=t)
        state = refine_prompt(refiner, state, fb)
    session.close("abandoned")
    return SessionResult(session=session, rounds_to_accept=None)
