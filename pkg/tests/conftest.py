from hypothesis import strategies as st

from t3attn.grid import GridDims, divisors


@st.composite
def valid_triples(draw, max_extent=8):
    """(dims, window, stride) with m * stride dividing every extent."""
    extents = [draw(st.integers(1, max_extent)) for _ in range(3)]
    window, stride = [], []
    for e in extents:
        m = draw(st.sampled_from(divisors(e)))
        window.append(m)
        stride.append(draw(st.sampled_from(divisors(e // m))))
    return GridDims(*extents), tuple(window), tuple(stride)


def naive_blocks_1d(extent, m, delta):
    """Reference 1-D interleaved tiling: enumerate each super-cell's residue classes."""
    out = []
    for start in range(0, extent, m * delta):
        for r in range(delta):
            out.append([start + r + j * delta for j in range(m)])
    return out


def naive_blocks(dims, window, stride):
    """3-D blocks as Cartesian products of the 1-D groups, as sets of flat indices."""
    per_axis = [naive_blocks_1d(e, m, d) for e, m, d in zip(dims.extents, window, stride)]
    blocks = []
    for gt in per_axis[0]:
        for gh in per_axis[1]:
            for gw in per_axis[2]:
                blocks.append(frozenset((t * dims.h + h) * dims.w + w for t in gt for h in gh for w in gw))
    return blocks



# acceptance criteria record one line each; printed at the end of the run
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
