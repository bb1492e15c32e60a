"""Latent-space attack: CW-style margin objectives, the answer gate, the inner
Adam loop over the code perturbation, and bisection over constants."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import torch
from torch.nn import functional as F

from .autoenc import AutoencoderParams, DecodeOutput, LatentCode, DTYPE
from .treeio import DepTree
from .victims import cls_logits, cls_logits_ids, qa_logits, qa_logits_ids


@dataclass
class AttackTarget:
    task: str                          # "cls" or "qa"
    label: int | None = None           # classification target t
    mode: str = "position"             # qa: "position" or "answer"
    start: int | None = None           # qa: t1, t2 in the placed paragraph
    end: int | None = None
    answer: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.task == "cls":
            if self.label is None or self.label < 0:
                raise ValueError("classification target needs a class index >= 0")
        elif self.task == "qa":
            if self.mode not in ("position", "answer"):
                raise ValueError(f"unknown qa target mode {self.mode!r}")
            if self.start is None or self.end is None or self.start > self.end:
                raise ValueError("qa target needs start <= end")
            if self.mode == "answer" and not self.answer:
                raise ValueError("answer-targeted attack needs the answer tokens")
        else:
            raise ValueError(f"unknown task {self.task!r}")


@dataclass
class AttackConfig:
    mode: str = "word"             # "word" or "sent"
    p: int = 2
    c: float = 10.0
    kappa: float = 1.0
    lr: float = 0.6
    steps: int = 100
    outer_max: int = 10
    tau_start: float = 1.0
    tau_end: float = 0.01
    g1: float = 1.0
    g2: float = 0.0
    placement: str | int = "default"   # "prepend", "append", sentence index, or task default
    c_low: float = 0.1
    c_high: float = 100.0
    c_rounds: int = 0                  # bisection rounds over c; 0 keeps c fixed
    kappa_rounds: int = 0
    kappa_high: float = 5.0
    restart_on_filter_fail: bool = False
    save_trace: bool = False
    record_time: bool = False          # wall-clock seconds make result files non-reproducible

    def __post_init__(self):
        if self.mode not in ("word", "sent"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if not self.c > 0:
            raise ValueError("c must be positive")
        if self.kappa < 0:
            raise ValueError("kappa must be non-negative")
        if self.p not in (1, 2):
            raise ValueError("p must be 1 or 2")
        if self.steps < 1 or self.outer_max < 1:
            raise ValueError("steps and outer_max must be >= 1")
        if not (self.tau_start > 0 and self.tau_end > 0):
            raise ValueError("temperatures must be positive")

    def tau(self, k: int) -> float:
        """Geometric schedule from tau_start (k = 0) to tau_end (k = steps)."""
        frac = k / self.steps
        return self.tau_start * (self.tau_end / self.tau_start) ** frac


# -- objectives ------------------------------------------------------------------

def _margin(Z: torch.Tensor, t: int) -> torch.Tensor:
    others = torch.cat([Z[:t], Z[t + 1:]])
    return others.max() - Z[t]


def f_cls(Z, t: int, kappa: float) -> torch.Tensor:
    """max(max_{i != t} Z_i - Z_t, -kappa)."""
    Z = torch.as_tensor(Z, dtype=DTYPE)
    if Z.shape[0] < 2:
        raise ValueError("need at least two classes")
    if not 0 <= t < Z.shape[0]:
        raise ValueError(f"target class {t} out of range")
    return torch.clamp(_margin(Z, t), min=-kappa)


def f_qa(Z1, Z2, t1: int, t2: int, kappa: float) -> torch.Tensor:
    """Sum of the start and end position margins, each floored at -kappa."""
    Z1 = torch.as_tensor(Z1, dtype=DTYPE)
    Z2 = torch.as_tensor(Z2, dtype=DTYPE)
    n = Z1.shape[0]
    if not (0 <= t1 < n and 0 <= t2 < Z2.shape[0]):
        raise ValueError(f"target positions ({t1}, {t2}) out of range")
    return torch.clamp(_margin(Z1, t1), min=-kappa) + torch.clamp(_margin(Z2, t2), min=-kappa)


def perturbation_norm(z_star: torch.Tensor, p: int) -> torch.Tensor:
    flat = z_star.reshape(-1)
    if p == 1:
        return flat.abs().sum()
    # written out so the gradient at exactly zero is 0 instead of nan
    sq = (flat * flat).sum()
    return torch.sqrt(sq) if sq > 0 else sq


def total_objective(z_star, f_value, p: int, c: float) -> torch.Tensor:
    return perturbation_norm(torch.as_tensor(z_star, dtype=DTYPE), p) + c * f_value


# -- gate ------------------------------------------------------------------------------

def apply_gate(decoded: DecodeOutput, original_ids: Sequence[int], span: tuple[int, int],
               g1: float, g2: float, vocab_size: int) -> DecodeOutput:
    """Blend rows t1..t2 (surface positions in the adversarial sentence):
    y_j <- g1 * y_j + g2 * x_j.  ``original_ids`` covers the span."""
    n = len(decoded.order)
    t1, t2 = span
    if not 0 <= t1 <= t2 < n:
        raise ValueError(f"gate span {span} outside a {n}-token sentence")
    if len(original_ids) != t2 - t1 + 1:
        raise ValueError("original tokens must cover the gate span exactly")
    if g1 == 1 and g2 == 0:
        return decoded
    rows = decoded.surface_rows()
    if decoded.soft:
        x = F.one_hot(torch.as_tensor(list(original_ids)), vocab_size).to(rows.dtype)
        blended = g1 * rows[t1:t2 + 1] + g2 * x
        rows = torch.cat([rows[:t1], blended, rows[t2 + 1:]])
        return DecodeOutput.from_surface(decoded.order, rows, soft=True)
    if g1 == 0 and g2 == 1:
        ids = rows.clone()
        ids[t1:t2 + 1] = torch.as_tensor(list(original_ids))
        return DecodeOutput.from_surface(decoded.order, ids, soft=False)
    one = F.one_hot(rows, vocab_size).to(DTYPE)
    x = F.one_hot(torch.as_tensor(list(original_ids)), vocab_size).to(DTYPE)
    one[t1:t2 + 1] = g1 * one[t1:t2 + 1] + g2 * x
    return DecodeOutput.from_surface(decoded.order, one, soft=True)


# -- victim context ---------------------------------------------------------------------

@dataclass
class VictimContext:
    """The unmodified input around the adversarial sentence.

    The adversarial rows are spliced in at token ``offset`` of the paragraph.
    """

    task: str
    victim: torch.nn.Module
    paragraph_ids: list[int]
    offset: int
    question_ids: list[int] | None = None

    def __post_init__(self):
        V = len(self.victim.vocab)
        self._before = F.one_hot(torch.as_tensor(self.paragraph_ids[:self.offset], dtype=torch.long), V).to(DTYPE)
        self._after = F.one_hot(torch.as_tensor(self.paragraph_ids[self.offset:], dtype=torch.long), V).to(DTYPE)
        if self.task == "qa":
            if not self.question_ids:
                raise ValueError("qa context needs the question")
            self._question = F.one_hot(torch.as_tensor(self.question_ids), V).to(DTYPE)

    def assemble_ids(self, adv_ids: Sequence[int]) -> list[int]:
        return self.paragraph_ids[:self.offset] + list(adv_ids) + self.paragraph_ids[self.offset:]

    def soft_logits(self, adv_rows: torch.Tensor):
        rows = torch.cat([self._before, adv_rows, self._after])
        if self.task == "cls":
            return cls_logits(self.victim, rows)
        return qa_logits(self.victim, rows, self._question)

    def hard_logits(self, adv_ids: Sequence[int]):
        ids = self.assemble_ids(adv_ids)
        if self.task == "cls":
            return cls_logits_ids(self.victim, ids)
        return qa_logits_ids(self.victim, ids, self.question_ids)

    def objective_f(self, logits, target: AttackTarget, kappa: float):
        if self.task == "cls":
            return f_cls(logits, target.label, kappa)
        return f_qa(logits[0], logits[1], target.start, target.end, kappa)


class LatentProblem:
    """Maps a perturbation z* to the soft/hard adversarial sentence and its score."""

    def __init__(self, code: LatentCode, tree: DepTree, ae: AutoencoderParams,
                 ctx: VictimContext, target: AttackTarget, config: AttackConfig,
                 gate_ids: Sequence[int] | None = None):
        self.code, self.tree, self.ae = code, tree, ae
        self.ctx, self.target, self.config = ctx, target, config
        self.forest = ae.forest([tree])
        self.order = [int(i) + 1 for i in self.forest.order]
        self.V = len(ae.vocab)
        if len(ctx.victim.vocab) != self.V or ctx.victim.vocab.digest() != ae.vocab.digest():
            raise ValueError("victim and autoencoder must share one vocabulary")
        self.gate = None
        if target.task == "qa":
            span = (target.start - ctx.offset, target.end - ctx.offset)
            if gate_ids is None:
                gate_ids = [0] * (span[1] - span[0] + 1)
            self.gate = (span, list(gate_ids))
        if code.mode == "word":
            self._base = code.payload.detach()

    def root(self, z_star: torch.Tensor) -> torch.Tensor:
        if self.code.mode == "sent":
            return self.code.payload.detach() + z_star
        h, _ = self.ae.encode_forest(self.forest, z_star + (self.code.payload.detach() - self._base))
        return h[self.forest.levels[0]][0]

    def _gated(self, out: DecodeOutput) -> DecodeOutput:
        if self.gate is None:
            return out
        span, ids = self.gate
        return apply_gate(out, ids, span, self.config.g1, self.config.g2, self.V)

    def soft_sentence(self, z_star, tau) -> torch.Tensor:
        out = self.ae.decode_forest(self.forest, self.root(z_star).unsqueeze(0), "soft", tau)
        return self._gated(DecodeOutput(self.order, out["probs"], soft=True)).surface_rows()

    def hard_sentence(self, z_star) -> list[int]:
        with torch.no_grad():
            out = self.ae.decode_forest(self.forest, self.root(z_star).unsqueeze(0), "hard")
        return self._gated(DecodeOutput(self.order, out["ids"], soft=False)).surface_ids()

    def evaluate(self, z_star, tau):
        """(objective, f, norm) of the relaxed problem at temperature tau."""
        rows = self.soft_sentence(z_star, tau)
        f = self.ctx.objective_f(self.ctx.soft_logits(rows), self.target, self.config.kappa)
        norm = perturbation_norm(z_star, self.config.p)
        return norm + self.config.c * f, f, norm


def optimize(code: LatentCode, tree: DepTree, ae: AutoencoderParams, ctx: VictimContext,
             target: AttackTarget, config: AttackConfig, z_init: torch.Tensor | None = None,
             accept: Callable[[list[int]], bool] | None = None,
             callback: Callable[[int, torch.Tensor, "LatentProblem"], None] | None = None,
             gate_ids: Sequence[int] | None = None):
    """Adam over z* minimising ||z*||_p + c * f(z + z*) on the relaxed decoder.

    The perturbation is evaluated once at the start and after each of the
    ``config.steps`` updates.  When ``accept`` is given the hard-decoded
    sentence is checked at every evaluation and the smallest-norm accepted z*
    is preferred; otherwise the best relaxed objective wins.
    Returns (z*, trace).
    """
    problem = LatentProblem(code, tree, ae, ctx, target, config, gate_ids)
    z = (torch.zeros_like(code.payload) if z_init is None else z_init.detach().clone())
    z = z.to(DTYPE).requires_grad_(True)
    opt = torch.optim.Adam([z], lr=config.lr)
    trace = []
    best = (math.inf, None)
    best_ok = (math.inf, None)
    for k in range(config.steps + 1):
        tau = config.tau(k)
        obj, f, norm = problem.evaluate(z, tau)
        if not torch.isfinite(obj):
            raise FloatingPointError(f"non-finite objective at step {k}")
        row = {"step": k, "objective": obj.item(), "f": f.item(), "norm": norm.item(),
               "tau": tau}
        if accept is not None:
            row["success"] = bool(accept(problem.hard_sentence(z.detach())))
            if row["success"] and row["norm"] < best_ok[0]:
                best_ok = (row["norm"], z.detach().clone())
        trace.append(row)
        if row["objective"] < best[0]:
            best = (row["objective"], z.detach().clone())
        if k == config.steps:
            break
        if k == 0 and not f.requires_grad:
            raise RuntimeError("victim provided no gradient with respect to its input")
        opt.zero_grad()
        obj.backward()
        opt.step()
        if callback is not None:
            callback(k + 1, z.detach(), problem)
    chosen = best_ok[1] if best_ok[1] is not None else best[1]
    return chosen, trace


# -- constant search --------------------------------------------------------------------

class SearchError(RuntimeError):
    def __init__(self, value, exc):
        super().__init__(f"attack closure failed at constant {value}: {exc}")
        self.value = value


@dataclass
class SearchResult:
    value: float | None
    history: list = field(default_factory=list)

    @property
    def success(self) -> bool:
        return self.value is not None


def binary_search_constant(run: Callable[[float], bool], low: float, high: float,
                           rounds: int, prefer: str = "low") -> SearchResult:
    """Bisection for the constant of a success/failure closure.

    prefer="low" (for c): a success moves the upper bound down, a failure moves
    the lower bound up, and the smallest succeeding midpoint is returned.
    prefer="high" (for kappa) mirrors this and returns the largest success.
    """
    if not low < high:
        raise ValueError("need low < high")
    if rounds < 1:
        raise ValueError("need at least one round")
    result = SearchResult(None)
    for _ in range(rounds):
        mid = (low + high) / 2
        try:
            ok = bool(run(mid))
        except Exception as exc:
            raise SearchError(mid, exc) from exc
        result.history.append((mid, ok))
        if prefer == "low":
            if ok:
                result.value = mid if result.value is None else min(result.value, mid)
                high = mid
            else:
                low = mid
        else:
            if ok:
                result.value = mid if result.value is None else max(result.value, mid)
                low = mid
            else:
                high = mid
    return result
