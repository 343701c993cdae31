import random

import pytest

from farm import protocol as P


def random_message(rng: random.Random) -> P.Message:
    """Draw a message with fields spread over their full ranges."""
    u64 = lambda: rng.choice((0, 1, P.U64_MAX, rng.getrandbits(64), rng.getrandbits(16)))
    u32 = lambda: rng.choice((0, 1, P.U32_MAX, rng.getrandbits(32), rng.getrandbits(8)))
    blobs = lambda: tuple(rng.randbytes(rng.choice((0, 1, 3, 17, 40))) for _ in range(rng.randrange(5)))
    kind = rng.randrange(10)
    if kind == 0:
        return P.ClientHello(u32())
    if kind == 1:
        return P.HelloAck(u64(), u64(), u32())
    if kind == 2:
        return P.ChunkRequest(u64(), u32())
    if kind == 3:
        return P.TaskChunkMsg(u64(), blobs())
    if kind == 4:
        return P.Drained()
    if kind == 5:
        return P.ResultChunkMsg(u64(), blobs())
    if kind == 6:
        return P.ResultAck(u64())
    if kind == 7:
        return P.Heartbeat(u64(), u64())
    if kind == 8:
        return P.HeartbeatAck(u64())
    return P.ShutdownNotice(rng.choice(list(P.ShutdownReason)))


@pytest.fixture
def rng():
    return random.Random(12345)


# One line per acceptance criterion, printed after the test run.
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
