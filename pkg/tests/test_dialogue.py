import itertools

import numpy as np
import pytest

from spritediff.autodiff import use_tape
from spritediff.dialogue import (
    DialogueError,
    DialogueSession,
    DiffusionGenerator,
    GenerationSettings,
    PromptState,
    RenderGenerator,
    RuleRefiner,
    embed_prompt,
    next_round,
    refine_prompt,
    replay_session,
    run_session,
)
from spritediff.diffusion import DenoiserConfig, DenoiserModel, NoiseSchedule
from spritediff.world import SPACE_SIZE, AttributeTuple, Feedback, SimulatedUser, render


@pytest.fixture(autouse=True)
def fresh_tape():
    with use_tape():
        yield


@pytest.fixture(scope="module")
def untrained_gen():
    model = DenoiserModel(DenoiserConfig(seed=4))
    return DiffusionGenerator(model, NoiseSchedule())


# -- prompt refinement ---------------------------------------------------------


def test_refine_accept_keeps_prompt():
    p = AttributeTuple("circle", 2, "small", 0, 1)
    state = PromptState(current=p)
    out = refine_prompt(RuleRefiner(), state, Feedback(kind="accept"))
    assert out.current == p
    assert len(out.history) == 1


def test_refine_single_override():
    p = AttributeTuple("circle", 0, "small", 0, 1)  # blue-ish index 0 = red
    state = PromptState(current=p)
    fb = Feedback(kind="attribute-correction", field="color", value=5)
    out = refine_prompt(RuleRefiner(), state, fb)
    assert out.current == p.replace("color", 5)


def test_refine_free_text_keeps_tuple():
    p = AttributeTuple("square", 3, "large", 2, 2)
    out = refine_prompt(RuleRefiner(), PromptState(current=p),
                        Feedback(kind="free-text", text="make it pop"))
    assert out.current == p


def test_refine_corrections_commute():
    # exhaustive over ordered field pairs: two corrections of different
    # fields reach the same tuple in either order
    base = AttributeTuple("circle", 0, "small", 0, 1)
    targets = {"shape": "triangle", "color": 6, "size": "large",
               "background": 3, "count": 3}
    for f1, f2 in itertools.permutations(targets, 2):
        fb1 = Feedback(kind="attribute-correction", field=f1, value=targets[f1])
        fb2 = Feedback(kind="attribute-correction", field=f2, value=targets[f2])
        s12 = refine_prompt(RuleRefiner(),
                            refine_prompt(RuleRefiner(), PromptState(base), fb1), fb2)
        s21 = refine_prompt(RuleRefiner(),
                            refine_prompt(RuleRefiner(), PromptState(base), fb2), fb1)
        assert s12.current == s21.current


def test_refiner_returning_garbage_rejected():
    class Broken:
        def refine(self, state, feedback):
            return "not a tuple"

    with pytest.raises(DialogueError):
        refine_prompt(Broken(), PromptState(AttributeTuple("circle", 0, "small", 0, 1)),
                      Feedback(kind="free-text", text="x"))


# -- embeddings -----------------------------------------------------------------


def test_embed_prompt_deterministic(untrained_gen):
    p = AttributeTuple("triangle", 1, "medium", 2, 3)
    psi1, c1 = embed_prompt(untrained_gen.model, p, 3)
    psi2, c2 = embed_prompt(untrained_gen.model, p, 3)
    assert np.array_equal(psi1.data, psi2.data)
    assert np.array_equal(c1.vector, c2.vector)
    assert c1.round_index == 3


def test_embed_prompt_distinguishes_attributes(untrained_gen):
    p = AttributeTuple("triangle", 1, "medium", 2, 3)
    q = p.replace("color", 2)
    psi_p, _ = embed_prompt(untrained_gen.model, p, 1)
    psi_q, _ = embed_prompt(untrained_gen.model, q, 1)
    assert not np.array_equal(psi_p.data, psi_q.data)


def test_embed_prompt_nonzero_over_full_space(untrained_gen):
    # exhaustive sweep of all 864 tuples
    for i in range(SPACE_SIZE):
        psi, _ = embed_prompt(untrained_gen.model, AttributeTuple.from_index(i), 1)
        n = np.linalg.norm(psi.data)
        assert np.isfinite(n) and n > 0


# -- generation --------------------------------------------------------------------


def test_degenerate_tau_settings_rejected(untrained_gen):
    with pytest.raises(DialogueError):
        GenerationSettings(tau1=40, tau2=0).validate(70)
    with pytest.raises(DialogueError):
        GenerationSettings(tau1=10, tau2=20).validate(70)
    with pytest.raises(DialogueError):
        GenerationSettings(tau1=100, tau2=25).validate(70)


def test_round1_deterministic_across_sessions(untrained_gen):
    p = AttributeTuple("square", 5, "medium", 1, 2)
    s1 = DialogueSession(session_id="a", seed=99, initial_prompt=p)
    s2 = DialogueSession(session_id="b", seed=99, initial_prompt=p)
    r1 = next_round(s1, untrained_gen, p, with_alternative=False)
    r2 = next_round(s2, untrained_gen, p, with_alternative=False)
    assert np.array_equal(r1.image, r2.image)
    s3 = DialogueSession(session_id="c", seed=100, initial_prompt=p)
    r3 = next_round(s3, untrained_gen, p, with_alternative=False)
    assert not np.array_equal(r1.image, r3.image)


def test_next_round_requires_active_session(untrained_gen):
    p = AttributeTuple("circle", 1, "small", 0, 1)
    s = DialogueSession(session_id="x", seed=1, initial_prompt=p)
    next_round(s, untrained_gen, p, with_alternative=False)
    s.close("accepted")
    with pytest.raises(DialogueError):
        next_round(s, untrained_gen, p, with_alternative=False)


def test_session_status_transitions():
    p = AttributeTuple("circle", 1, "small", 0, 1)
    s = DialogueSession(session_id="x", seed=1, initial_prompt=p)
    s.close("accepted")
    with pytest.raises(DialogueError):
        s.close("abandoned")


# -- simulated sessions -------------------------------------------------------------


def test_render_faithful_accepts_round_one():
    target = AttributeTuple("square", 4, "large", 1, 2)
    user = SimulatedUser(target=target)
    res = run_session(user, target, max_rounds=5, generator=RenderGenerator())
    assert res.rounds_to_accept == 1
    assert res.session.status == "accepted"


def test_render_faithful_takes_exactly_k_plus_one_rounds():
    rng = np.random.default_rng(3)
    for _ in range(40):
        target = AttributeTuple.random(rng)
        initial = AttributeTuple.random(rng)
        k = len(initial.mismatches(target))
        res = run_session(SimulatedUser(target=target), initial, max_rounds=8,
                          generator=RenderGenerator())
        assert res.rounds_to_accept == k + 1


def test_rounds_to_accept_lower_bound():
    # one-correction-per-round cannot be beaten: acceptance needs at least
    # 1 + initial mismatch count rounds
    rng = np.random.default_rng(4)
    for _ in range(40):
        target = AttributeTuple.random(rng)
        initial = AttributeTuple.random(rng)
        k = len(initial.mismatches(target))
        res = run_session(SimulatedUser(target=target), initial, max_rounds=12,
                          generator=RenderGenerator())
        if res.accepted:
            assert res.rounds_to_accept >= 1 + k


def test_budget_exhaustion_abandons():
    target = AttributeTuple("square", 4, "large", 1, 2)
    initial = target.replace("color", 0)
    res = run_session(SimulatedUser(target=target), initial, max_rounds=1,
                      generator=RenderGenerator())
    assert res.rounds_to_accept is None
    assert res.session.status == "abandoned"
    assert len(res.session.rounds) == 1


def test_session_never_exceeds_max_rounds(untrained_gen):
    target = AttributeTuple("square", 4, "large", 1, 2)
    res = run_session(SimulatedUser(target=target), target.replace("count", 1),
                      max_rounds=3, generator=untrained_gen)
    assert len(res.session.rounds) <= 3


def test_transcript_replay_bit_for_bit(untrained_gen):
    target = AttributeTuple("triangle", 6, "small", 3, 1)
    initial = target.replace("color", 1)
    res = run_session(SimulatedUser(target=target), initial, max_rounds=4,
                      generator=untrained_gen, seed=42, with_alternative=True)
    replayed = replay_session(res.session, untrained_gen)
    assert len(replayed.rounds) == len(res.session.rounds)
    for a, b in zip(res.session.rounds, replayed.rounds):
        assert np.array_equal(a.image, b.image)
        assert np.array_equal(a.latent, b.latent)
        if a.alt_image is not None:
            assert np.array_equal(a.alt_image, b.alt_image)


def test_transcript_serialization_round_trip(untrained_gen):
    target = AttributeTuple("circle", 3, "medium", 2, 2)
    res = run_session(SimulatedUser(target=target), target.replace("size", "small"),
                      max_rounds=3, generator=untrained_gen, seed=5,
                      with_alternative=True)
    d = res.session.to_dict()
    back = DialogueSession.from_dict(d)
    assert back.session_id == res.session.session_id
    assert back.status == res.session.status
    assert len(back.rounds) == len(res.session.rounds)
    from spritediff.world import quantize

    for a, b in zip(res.session.rounds, back.rounds):
        assert np.array_equal(quantize(a.image), quantize(b.image))
        assert np.array_equal(a.latent, b.latent)
        assert a.rewards.as_dict() == b.rewards.as_dict()
