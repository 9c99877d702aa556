"""Synthetic dataset generation and line-delimited record files.

Two record kinds, one JSON object per line:

preference pairs   {"prompt": {...}, "pos_image": "path.png", "neg_image": "path.png"}
dialogue rounds    {"session": int, "round": int, "prompt": {...}, "image": "path.png",
                    "prev_image": "path.png" | null, "feedback": {...} | null}

Labels in a pair are fixed by position (pos = 1, neg = 0). Images are
written once as lossless PNGs and referenced by relative path.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .preference import PreferencePair
from .world import AttributeTuple, Feedback, SimulatedUser, load_png, render, save_png


@dataclass(frozen=True)
class DialogueRecord:
    """One round of a scripted dialogue: the prompt and its target image."""

    session: int
    round_index: int
    prompt: AttributeTuple
    image: np.ndarray
    prev_image: Optional[np.ndarray]
    feedback: Optional[Feedback]


def synth_preference_pairs(n: int, rng: np.random.Generator) -> list[PreferencePair]:
    """Matching render as positive, a different tuple's render as negative."""
    out = []
    for _ in range(n):
        prompt = AttributeTuple.random(rng)
        other = AttributeTuple.random(rng)
        while other == prompt:
            other = AttributeTuple.random(rng)
        out.append(PreferencePair(prompt, render(prompt), render(other)))
    return out


def synth_dialogues(n_sessions: int, rng: np.random.Generator,
                    max_rounds: int = 8) -> list[DialogueRecord]:
    """Scripted sessions against a render-faithful generator.

    Each session walks from a random initial prompt toward a random target,
    one corrected attribute per round; round images are the prompts' renders.
    """
    records = []
    for s in range(n_sessions):
        target = AttributeTuple.random(rng)
        prompt = AttributeTuple.random(rng)
        user = SimulatedUser(target=target)
        prev_img = None
        for t in range(1, max_rounds + 1):
            img = render(prompt)
            fb = user.feedback(img)
            records.append(DialogueRecord(session=s, round_index=t, prompt=prompt,
                                          image=img, prev_image=prev_img, feedback=fb))
            if fb.kind == "accept":
                break
            prev_img = img
            prompt = prompt.replace(fb.field, fb.value)
    return records


def write_preference_pairs(pairs, out_dir, name: str = "preference_pairs") -> Path:
    out_dir = Path(out_dir)
    img_dir = out_dir / f"{name}_images"
    img_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{name}.jsonl"
    with open(path, "w", encoding="utf-8") as fh:
        for i, p in enumerate(pairs):
            pos_rel = f"{name}_images/pair{i:05d}_pos.png"
            neg_rel = f"{name}_images/pair{i:05d}_neg.png"
            save_png(p.image_pos, out_dir / pos_rel)
            save_png(p.image_neg, out_dir / neg_rel)
            fh.write(json.dumps({"prompt": p.prompt.to_dict(),
                                 "pos_image": pos_rel, "neg_image": neg_rel}) + "\n")
    return path


def read_preference_pairs(path) -> list[PreferencePair]:
    path = Path(path)
    base = path.parent
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            out.append(PreferencePair(
                prompt=AttributeTuple.from_dict(rec["prompt"]),
                image_pos=load_png(base / rec["pos_image"]),
                image_neg=load_png(base / rec["neg_image"]),
            ))
    return out


def write_dialogues(records, out_dir, name: str = "dialogues") -> Path:
    out_dir = Path(out_dir)
    img_dir = out_dir / f"{name}_images"
    img_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{name}.jsonl"
    written: dict[tuple[int, int], str] = {}
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            rel = f"{name}_images/s{rec.session:04d}_r{rec.round_index:02d}.png"
            save_png(rec.image, out_dir / rel)
            written[(rec.session, rec.round_index)] = rel
            prev_rel = written.get((rec.session, rec.round_index - 1))
            fh.write(json.dumps({
                "session": rec.session,
                "round": rec.round_index,
                "prompt": rec.prompt.to_dict(),
                "image": rel,
                "prev_image": prev_rel,
                "feedback": rec.feedback.to_dict() if rec.feedback else None,
            }) + "\n")
    return path


def read_dialogues(path) -> list[DialogueRecord]:
    path = Path(path)
    base = path.parent
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            out.append(DialogueRecord(
                session=rec["session"],
                round_index=rec["round"],
                prompt=AttributeTuple.from_dict(rec["prompt"]),
                image=load_png(base / rec["image"]),
                prev_image=load_png(base / rec["prev_image"]) if rec.get("prev_image") else None,
                feedback=Feedback.from_dict(rec["feedback"]) if rec.get("feedback") else None,
            ))
    return out
