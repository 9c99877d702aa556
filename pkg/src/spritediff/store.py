"""File-backed session store with atomic writes.

One directory per session holding ``transcript.json`` plus round images
as PNGs; a flat JSONL file collects recorded preference pairs. Every
write lands via write-temp-then-rename, so a crash between requests can
never leave a half-written document behind.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

from .dialogue import DialogueSession
from .world import save_png


class StoreError(ValueError):
    pass


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


class SessionStore:
    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        (self.root / "sessions").mkdir(exist_ok=True)

    # -- sessions ------------------------------------------------------------

    def session_dir(self, session_id: str) -> Path:
        if not session_id or "/" in session_id or session_id.startswith("."):
            raise StoreError(f"illegal session id {session_id!r}")
        return self.root / "sessions" / session_id

    def save_session(self, session: DialogueSession) -> None:
        d = self.session_dir(session.session_id)
        d.mkdir(parents=True, exist_ok=True)
        for r in session.rounds:
            img_path = d / f"round_{r.index:03d}.png"
            if not img_path.exists():
                save_png(r.image, img_path)
            if r.alt_image is not None:
                alt_path = d / f"round_{r.index:03d}_alt.png"
                if not alt_path.exists():
                    save_png(r.alt_image, alt_path)
        _atomic_write(d / "transcript.json",
                      json.dumps(session.to_dict(), indent=1))

    def load_session(self, session_id: str) -> DialogueSession:
        path = self.session_dir(session_id) / "transcript.json"
        if not path.exists():
            raise KeyError(session_id)
        with open(path, encoding="utf-8") as fh:
            return DialogueSession.from_dict(json.load(fh))

    def has_session(self, session_id: str) -> bool:
        return (self.session_dir(session_id) / "transcript.json").exists()

    def session_ids(self) -> list[str]:
        out = []
        for d in sorted((self.root / "sessions").iterdir()):
            if (d / "transcript.json").exists():
                out.append(d.name)
        return out

    def raw_transcript(self, session_id: str) -> str:
        path = self.session_dir(session_id) / "transcript.json"
        if not path.exists():
            raise KeyError(session_id)
        return path.read_text(encoding="utf-8")

    # -- preference pairs ------------------------------------------------------

    @property
    def pairs_path(self) -> Path:
        return self.root / "choices.jsonl"

    def append_pair(self, record: dict) -> None:
        # rewrite-and-rename keeps the pair file atomic as well
        lines = []
        if self.pairs_path.exists():
            lines = self.pairs_path.read_text(encoding="utf-8").splitlines()
        lines.append(json.dumps(record))
        _atomic_write(self.pairs_path, "\n".join(lines) + "\n")

    def pairs(self) -> list[dict]:
        if not self.pairs_path.exists():
            return []
        out = []
        for line in self.pairs_path.read_text(encoding="utf-8").splitlines():
            if line.strip():
                out.append(json.loads(line))
        return out
