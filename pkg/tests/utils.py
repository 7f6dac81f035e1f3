""" Utilities to share among test modules """

import logging
import subprocess
from pathlib import Path
from typing import Dict, List, Optional, Sequence as Seq, Tuple

import numpy as np

from editdiff.models import N_HEAD, UNMASK_HEAD, head_codomain
from editdiff.types import EditPrediction, MaskedSequence, Sequence, Vocab

logger = logging.getLogger(__name__)

ABC = Vocab.build("abcdxyz")


def seq(target: str, prompt: str = "") -> Sequence:
    """Complete ABC sequence (EOS appended), one character per symbol."""
    return ABC.sequence(list(target), list(prompt))


def one_hot_rows(ids: Seq[int], width: int) -> np.ndarray:
    rows = np.zeros((len(ids), width), dtype=np.float64)
    rows[np.arange(len(ids)), list(ids)] = 1.0
    return rows


class ScriptedModel:
    """A DenoiserModel whose edit heads replay fixed predictions per input.

    Unknown inputs get the empty edit. The unmask head always predicts
    'unmask_token' (default: the first content symbol).
    """

    def __init__(
        self,
        vocab: Vocab,
        edits: Optional[Dict[Tuple[int, ...], EditPrediction]] = None,
        unmask_token: Optional[int] = None,
    ):
        self._vocab = vocab
        self.edits = edits or {}
        self.unmask_token = (
            vocab.content_ids[0] if unmask_token is None else unmask_token
        )
        self.calls: List[Tuple[int, ...]] = []

    @property
    def vocab(self) -> Vocab:
        return self._vocab

    def predict_unmask(self, xt: MaskedSequence) -> np.ndarray:
        count = len(xt.masked_positions)
        return one_hot_rows([self.unmask_token] * count, len(self.vocab))

    def predict_edits(self, x: Sequence) -> Tuple[np.ndarray, np.ndarray]:
        self.calls.append(x.tokens)
        prediction = self.edits.get(x.tokens, EditPrediction.identity(x))
        n = [
            t if head_codomain(self.vocab, N_HEAD)[t] else self.vocab.eos_id
            for t in prediction.n
        ]
        return (
            one_hot_rows(prediction.c, len(self.vocab)),
            one_hot_rows(n, len(self.vocab)),
        )


def uniform_unmask_rows(vocab: Vocab, count: int) -> np.ndarray:
    allowed = head_codomain(vocab, UNMASK_HEAD)
    rows = np.zeros((count, len(vocab)), dtype=np.float64)
    rows[:, allowed] = 1.0 / allowed.sum()
    return rows


def run_editdiff(
    *args: str,
    config_file: Optional[Path] = None,
    cwd: Optional[Path] = None,
    env: Optional[Dict[str, str]] = None,
) -> Tuple[str, str, int]:
    argv = ["editdiff"] + list(args)
    if config_file is not None:
        argv.append(f"--config={config_file}")
    proc = subprocess.run(
        argv,
        stdout=subprocess.PIPE,
        stderr=subprocess.PIPE,
        universal_newlines=True,
        check=False,
        cwd=cwd,
        env=env,
    )
    logger.debug(
        f"Run `editdiff {' '.join(args)}` returned exit code {proc.returncode}\n"
        f"    ---- STDOUT ----\n{proc.stdout}"
        f"    ---- STDERR ----\n{proc.stderr}"
        "    ----------------"
    )
    return proc.stdout.strip(), proc.stderr.strip(), proc.returncode
