import numpy as np
import pytest

from cornermark import synthgen
from cornermark.tracking import ATTACKING, DEFENDING, CornerSequence


def make_sequence(D, O, VD=None, VO=None, *, sid="s0", team="T1", delivery="inswing",
                  delivery_frame=0, contact=None, contact_player=None, game_id=None, order=None,
                  goalkeeper=False, heights=None):
    """Corner from defender/attacker tracks of shape (T, n, 2)."""
    D = np.asarray(D, float)
    O = np.asarray(O, float)
    T, J = D.shape[:2]
    K = O.shape[1]
    VD = np.zeros_like(D) if VD is None else np.asarray(VD, float)
    VO = np.zeros_like(O) if VO is None else np.asarray(VO, float)
    ids = [f"D{j}" for j in range(J)] + [f"A{k}" for k in range(K)]
    teams = [DEFENDING] * J + [ATTACKING] * K
    pos, vel = [D, O], [VD, VO]
    gk = [False] * (J + K)
    if goalkeeper:
        ids.append("GK")
        teams.append(DEFENDING)
        gk.append(True)
        pos.append(np.tile([[-10.5, 0.0]], (T, 1, 1)))
        vel.append(np.zeros((T, 1, 2)))
    P = len(ids)
    h = np.full(P, 1.8) if heights is None else np.asarray(heights, float)
    return CornerSequence(
        sequence_id=sid, delivery_type=delivery, defending_team_id=team, player_ids=tuple(ids),
        teams=tuple(teams), is_goalkeeper=np.array(gk), heights=h, weights=np.full(P, 75.0),
        positions=np.concatenate(pos, axis=1), velocities=np.concatenate(vel, axis=1),
        delivery_frame=delivery_frame, first_contact_frame=contact,
        first_contact_player_id=contact_player, game_id=game_id, order=order,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def small_truth():
    return synthgen.default_truth(K=3, sigma2=0.25)


@pytest.fixture(scope="session")
def small_synth(small_truth):
    spec = synthgen.ScenarioSpec(small_truth, T=20, n_sequences=12, seed=5)
    return synthgen.generate_dataset(spec)


@pytest.fixture(scope="session")
def tiny_truth():
    """Two attackers, short sequences: small enough for path enumeration."""
    return synthgen.default_truth(K=2, sigma2=1.0)


@pytest.fixture(scope="session")
def tiny_synth(tiny_truth):
    spec = synthgen.ScenarioSpec(tiny_truth, T=4, n_sequences=6, seed=11)
    return synthgen.generate_dataset(spec)


# criterion lines collected by the acceptance tests, echoed after the run
ACCEPTANCE: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
