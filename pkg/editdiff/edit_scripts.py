"""Edit distance, canonical edit scripts and token-wise edit targets.

Scripts are indexed against the source sequence (absolute positions, prompt
included) and only ever touch the generated region. Internally a script is
handled as an Alignment: the fate of every source position (kept with a
target token, or deleted) plus the groups of inserted tokens, each group
attached to the kept position it precedes (or to the tail).
"""

import logging
from collections import deque
from dataclasses import dataclass
from typing import Deque, Dict, Iterable, List, Optional, Set, Tuple

from editdiff.types import (
    Delete,
    EditOp,
    EditScript,
    EditTargets,
    Insert,
    Replace,
    Sequence,
    SupervisionError,
    Vocab,
    op_sort_key,
)

logger = logging.getLogger(__name__)

ORACLE_MAX_LEN = 8

Table = List[List[int]]


def _check_prompts(a: Sequence, b: Sequence) -> None:
    if a.prompt != b.prompt:
        raise SupervisionError(f"Prompt mismatch: {a.prompt} vs {b.prompt}")


def distance_table(source: Tuple[int, ...], target: Tuple[int, ...]) -> Table:
    """Unit-cost Levenshtein DP table; table[i][j] = d(source[:i], target[:j])."""
    rows = len(source) + 1
    cols = len(target) + 1
    table = [[0] * cols for _ in range(rows)]
    for i in range(rows):
        table[i][0] = i
    for j in range(cols):
        table[0][j] = j
    for i in range(1, rows):
        for j in range(1, cols):
            table[i][j] = min(
                table[i - 1][j - 1] + (source[i - 1] != target[j - 1]),
                table[i - 1][j] + 1,
                table[i][j - 1] + 1,
            )
    return table


def levenshtein_distance(a: Sequence, b: Sequence) -> int:
    """Edit distance between the generated regions of two sequences."""
    _check_prompts(a, b)
    return distance_table(a.region, b.region)[-1][-1]


@dataclass(frozen=True)
class Alignment:
    """Per-position fates of a source sequence plus grouped insertions.

    fates[j] is the target token of source position j, or None if deleted.
    groups[k] holds the tokens inserted right before kept position k;
    groups[len(source)] holds tokens inserted after the last position.
    """

    source: Sequence
    fates: Tuple[Optional[int], ...]
    groups: Tuple[Tuple[int, ...], ...]

    def target_tokens(self) -> Tuple[int, ...]:
        out: List[int] = list(self.source.prompt)
        for j in range(self.source.prompt_len, len(self.source)):
            out.extend(self.groups[j])
            fate = self.fates[j]
            if fate is not None:
                out.append(fate)
        out.extend(self.groups[-1])
        return tuple(out)

    def to_script(self) -> EditScript:
        tokens = self.source.tokens
        ops: List[EditOp] = []
        for j in range(self.source.prompt_len, len(tokens)):
            ops.extend(Insert(j - 1, token) for token in self.groups[j])
            fate = self.fates[j]
            if fate is None:
                ops.append(Delete(j))
            elif fate != tokens[j]:
                ops.append(Replace(j, fate))
        ops.extend(Insert(len(tokens) - 1, token) for token in self.groups[-1])
        return EditScript(tuple(ops))


def _next_kept(fates: List[Optional[int]], after: int) -> int:
    """First kept position after 'after', or len(fates) for the tail."""
    k = after + 1
    while k < len(fates) and fates[k] is None:
        k += 1
    return k


def align(a: Sequence, script: EditScript) -> Alignment:
    """Interpret 'script' against 'a'; raise SupervisionError if it is invalid."""
    fates: List[Optional[int]] = list(a.tokens)
    touched: Set[int] = set()
    inserts: List[Insert] = []
    lo, hi = a.prompt_len, len(a)
    for op in sorted(script.ops, key=op_sort_key):
        if isinstance(op, Insert):
            if not lo - 1 <= op.after_pos < hi:
                raise SupervisionError(f"{op} lies outside the generated region")
            inserts.append(op)
            continue
        if not lo <= op.pos < hi:
            raise SupervisionError(f"{op} lies outside the generated region")
        if op.pos in touched:
            raise SupervisionError(f"Position {op.pos} is edited twice")
        touched.add(op.pos)
        fates[op.pos] = op.token if isinstance(op, Replace) else None

    groups: List[List[int]] = [[] for _ in range(len(a) + 1)]
    for op in inserts:
        groups[_next_kept(fates, op.after_pos)].append(op.token)
    return Alignment(a, tuple(fates), tuple(tuple(g) for g in groups))


def apply_script(a: Sequence, script: EditScript) -> Sequence:
    """Apply an edit script to 'a' directly."""
    return Sequence(align(a, script).target_tokens(), a.prompt_len)


def backtrace_script(a: Sequence, b: Sequence) -> EditScript:
    """A shortest script found by backtracing the DP table from the end.

    At every cell the first feasible move wins, in the order
    Match > Substitute > Delete > Insert.
    """
    _check_prompts(a, b)
    source, target = a.region, b.region
    table = distance_table(source, target)
    offset = a.prompt_len
    ops: List[EditOp] = []
    i, j = len(source), len(target)
    while i > 0 or j > 0:
        here = table[i][j]
        if i and j and source[i - 1] == target[j - 1] and here == table[i - 1][j - 1]:
            i, j = i - 1, j - 1
        elif i and j and here == table[i - 1][j - 1] + 1:
            ops.append(Replace(offset + i - 1, target[j - 1]))
            i, j = i - 1, j - 1
        elif i and here == table[i - 1][j] + 1:
            ops.append(Delete(offset + i - 1))
            i -= 1
        else:
            ops.append(Insert(offset + i - 1, target[j - 1]))
            j -= 1
    ops.reverse()
    return EditScript(tuple(ops))


def canonicalize_insertions(script: EditScript, a: Sequence) -> EditScript:
    """Move insertions off positions where the operator cannot realize them.

    The operator never inserts a token equal to the kept token it precedes.
    Whenever the first token of a group equals that kept token, the kept
    position is re-aligned onto the inserted copy and the rest of the group
    moves after it, repeating rightwards; the script stays the same length.
    """
    alignment = align(a, script)
    fates = list(alignment.fates)
    groups = [list(g) for g in alignment.groups]
    k = _next_kept(fates, a.prompt_len - 1)
    while k < len(fates):
        following = _next_kept(fates, k)
        group = groups[k]
        if group and group[0] == fates[k]:
            groups[following] = group[1:] + group[:1] + groups[following]
            groups[k] = []
        k = following
    canonical = Alignment(a, tuple(fates), tuple(tuple(g) for g in groups))
    return canonical.to_script()


def minimal_edit_script(a: Sequence, b: Sequence) -> EditScript:
    """The canonical shortest script turning region 'a' into region 'b'."""
    return canonicalize_insertions(backtrace_script(a, b), a)


def script_to_targets(a: Sequence, script: EditScript, vocab: Vocab) -> EditTargets:
    """Map a canonical script onto per-position (c*, n*) targets.

    Kept positions get their target token as c*, deleted ones DEL. The first
    token of each insertion group is carried by the n* of the original
    predecessor slot of the kept position it precedes; the remaining tokens
    are deferred to later steps. Slots without insertion are trained to
    predict the kept token that follows. Slots whose candidate the operator
    discards are left out of the loss.
    """
    alignment = align(a, script)
    fates, groups = alignment.fates, alignment.groups
    length, prompt_len = len(a), a.prompt_len
    del_id = vocab.del_id

    deferred = len(groups[-1])  # nothing can be inserted after the last slot
    if prompt_len == 0 and groups[0]:
        deferred += len(groups[0])  # no boundary slot without a prompt
    for k in range(prompt_len, length):
        if groups[k] and groups[k][0] == fates[k]:
            raise SupervisionError(
                f"Script is not canonical: insertion of {groups[k][0]} before "
                f"an equal kept token at position {k}"
            )
        if groups[k] and k > 0:
            deferred += len(groups[k]) - 1

    c_star = tuple(del_id if fate is None else fate for fate in fates)
    n_star: List[Optional[int]] = []
    for i in range(length):
        succ = i + 1
        if i < prompt_len - 1 or succ >= length or fates[succ] is None:
            n_star.append(None)
        elif groups[succ]:
            n_star.append(groups[succ][0])
        else:
            n_star.append(fates[succ])
    loss_mask = tuple(cand is not None for cand in n_star)
    if deferred:
        logger.debug(f"{deferred} insertion(s) deferred to later steps")
    return EditTargets(c_star, tuple(n_star), loss_mask, deferred)


def common_prefix_len(a: Sequence, b: Sequence) -> int:
    """Number of leading generated tokens on which a and b agree."""
    n = 0
    for x, y in zip(a.region, b.region):
        if x != y:
            break
        n += 1
    return n


def nearest_references(x: Sequence, corpus: Iterable[Sequence]) -> List[Sequence]:
    """Corpus sequences with x's prompt closest to x, in corpus order.

    Closest means minimal edit distance, and among those the longest common
    prefix of the generated region. Empty when no corpus sequence shares
    the prompt of x.
    """
    same_prompt = [y for y in corpus if y.prompt == x.prompt]
    if not same_prompt:
        return []
    distances = [levenshtein_distance(x, y) for y in same_prompt]
    best = min(distances)
    nearest = [y for y, d in zip(same_prompt, distances) if d == best]
    longest = max(common_prefix_len(x, y) for y in nearest)
    return [y for y in nearest if common_prefix_len(x, y) == longest]


Cell = Tuple[int, int]


def _edit_graph_moves(
    source: Tuple[int, ...], target: Tuple[int, ...], cell: Cell
) -> List[Tuple[Cell, int]]:
    i, j = cell
    out = []
    if i < len(source) and j < len(target):
        out.append(((i + 1, j + 1), int(source[i] != target[j])))
    if i < len(source):
        out.append(((i + 1, j), 1))
    if j < len(target):
        out.append(((i, j + 1), 1))
    return out


def _edit_graph_distances(
    source: Tuple[int, ...], target: Tuple[int, ...]
) -> Dict[Cell, int]:
    # 0-1 breadth-first search: free edges go to the front of the queue
    dist: Dict[Cell, int] = {(0, 0): 0}
    queue: Deque[Cell] = deque([(0, 0)])
    while queue:
        cell = queue.popleft()
        for nxt, cost in _edit_graph_moves(source, target, cell):
            if dist[cell] + cost < dist.get(nxt, 1 << 30):
                dist[nxt] = dist[cell] + cost
                if cost:
                    queue.append(nxt)
                else:
                    queue.appendleft(nxt)
    return dist


def oracle_distance(a: Sequence, b: Sequence) -> int:
    """Shortest-script length found by breadth-first search of the edit graph."""
    _check_prompts(a, b)
    dist = _edit_graph_distances(a.region, b.region)
    return dist[(len(a.region), len(b.region))]


def oracle_min_scripts(a: Sequence, b: Sequence) -> Set[EditScript]:
    """All shortest scripts between 'a' and 'b', found by breadth-first search.

    Searches the edit graph (cells (i, j), unit-cost insert/delete/substitute
    edges, free match edges) and enumerates every shortest path. Only meant
    for short sequences; raises SupervisionError past ORACLE_MAX_LEN.
    """
    _check_prompts(a, b)
    source, target = a.region, b.region
    if max(len(source), len(target)) > ORACLE_MAX_LEN:
        raise SupervisionError(
            f"Oracle search is limited to regions of {ORACLE_MAX_LEN} tokens"
        )

    def moves(cell: Cell) -> List[Tuple[Cell, int]]:
        return _edit_graph_moves(source, target, cell)

    dist = _edit_graph_distances(source, target)

    # cost-to-go: backward[i][j] = d(source[i:], target[j:])
    reverse = distance_table(source[::-1], target[::-1])
    n, m = len(source), len(target)
    total = dist[(n, m)]

    def on_shortest_path(cell: Cell) -> bool:
        i, j = cell
        return dist[cell] + reverse[n - i][m - j] == total

    offset = a.prompt_len
    scripts: Set[EditScript] = set()

    def walk(cell: Cell, ops: Tuple[EditOp, ...]) -> None:
        if cell == (n, m):
            scripts.add(EditScript(tuple(sorted(ops, key=op_sort_key))))
            return
        i, j = cell
        for nxt, cost in moves(cell):
            if dist[nxt] != dist[cell] + cost or not on_shortest_path(nxt):
                continue
            ni, nj = nxt
            if ni > i and nj > j:
                step: Tuple[EditOp, ...] = (
                    (Replace(offset + i, target[j]),) if cost else ()
                )
            elif ni > i:
                step = (Delete(offset + i),)
            else:
                step = (Insert(offset + i - 1, target[j]),)
            walk(nxt, ops + step)

    walk((0, 0), ())
    logger.debug(f"Oracle found {len(scripts)} shortest script(s) of length {total}")
    return scripts
