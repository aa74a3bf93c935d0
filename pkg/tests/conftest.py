import numpy as np

from factored_tts.factor_encoding import NEUTRAL, emotion_id, speaker_id


def random_factors(rng, n, M, N, neutral_rate=0.3):
    """Row-stacked one-hot emotion/speaker IDs with some neutral rows."""
    e = np.zeros((n, M))
    s = np.zeros((n, N))
    for r in range(n):
        if M and rng.random() >= neutral_rate:
            e[r] = emotion_id(int(rng.integers(1, M + 1)), M)
        else:
            e[r] = emotion_id(NEUTRAL, M) if M else e[r]
        s[r] = speaker_id(int(rng.integers(1, N + 1)), N)
    return e, s


def finite_difference_grads(net, x, e, s, weights, step=1e-5):
    """Central differences of sum(weights * forward) with respect to every parameter."""
    out = {}
    for name, arr in net.parameters():
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = arr[idx]
            arr[idx] = orig + step
            net.mark_modified()
            up = float(np.sum(weights * net.forward(x, e, s)))
            arr[idx] = orig - step
            net.mark_modified()
            down = float(np.sum(weights * net.forward(x, e, s)))
            arr[idx] = orig
            net.mark_modified()
            g[idx] = (up - down) / (2 * step)
        out[name] = g
    return out


def relative_error(a, b):
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8)
    return float(np.max(np.abs(a - b)) / scale)


ACCEPTANCE_LINES = []


def record_criterion(number, passed, detail):
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
