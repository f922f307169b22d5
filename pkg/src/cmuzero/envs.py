"""Native continuous-control environments.

Cart-pole and cart + double pendulum are integrated from their equations of
motion; the bandit is a one-step task with a known optimum used to check
the search. All actions live on the [-1, 1] box.

Dynamics are pure functions of (state, action); the env classes only hold
the current state, the step counter and the reset RNG.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class EnvSpec:
    obs_dim: int
    action_dim: int
    max_steps: int
    reward_bound: float  # max |reward| per step

    def __post_init__(self):
        if self.obs_dim < 1 or self.action_dim < 1:
            raise ValueError("dimensions must be >= 1")


@dataclass
class StepResult:
    observation: np.ndarray
    reward: float
    done: bool


RESET_NOISE = 0.01

# ---------------------------------------------------------------------------
# cart-pole

CP_GRAVITY = 9.81
CP_CART_MASS = 1.0
CP_POLE_MASS = 0.1
CP_HALF_LENGTH = 0.5
CP_FORCE = 3.0
CP_DT = 0.02
CP_ANGLE_LIMIT = 0.2
CP_POSITION_LIMIT = 1.0


def cartpole_observation(state: np.ndarray) -> np.ndarray:
    x, theta, x_dot, theta_dot = state
    return np.array([x, math.sin(theta), math.cos(theta), x_dot, theta_dot])


def cartpole_alive(state: np.ndarray) -> bool:
    return abs(state[1]) <= CP_ANGLE_LIMIT and abs(state[0]) <= CP_POSITION_LIMIT


def cartpole_dynamics(state: np.ndarray, action) -> np.ndarray:
    """One semi-implicit Euler step; angle 0 is upright."""
    x, theta, x_dot, theta_dot = state
    force = CP_FORCE * float(np.clip(np.asarray(action).reshape(-1)[0], -1.0, 1.0))
    total = CP_CART_MASS + CP_POLE_MASS
    sin, cos = math.sin(theta), math.cos(theta)
    temp = (force + CP_POLE_MASS * CP_HALF_LENGTH * theta_dot ** 2 * sin) / total
    theta_acc = (CP_GRAVITY * sin - cos * temp) / (
        CP_HALF_LENGTH * (4.0 / 3.0 - CP_POLE_MASS * cos ** 2 / total))
    x_acc = temp - CP_POLE_MASS * CP_HALF_LENGTH * theta_acc * cos / total
    x_dot = x_dot + CP_DT * x_acc
    theta_dot = theta_dot + CP_DT * theta_acc
    return np.array([x + CP_DT * x_dot, theta + CP_DT * theta_dot, x_dot, theta_dot])


def step_cartpole(state: np.ndarray, action, t: int = 0, max_steps: int = 1000):
    """Returns (next_state, StepResult). ``t`` counts steps already taken."""
    if not cartpole_alive(state):
        return state.copy(), StepResult(cartpole_observation(state), 0.0, True)
    nxt = cartpole_dynamics(state, action)
    alive = cartpole_alive(nxt)
    done = (not alive) or t + 1 >= max_steps
    return nxt, StepResult(cartpole_observation(nxt), 1.0 if alive else 0.0, done)


# ---------------------------------------------------------------------------
# cart + double pendulum (uniform rods, angles measured from upright)

DP_GRAVITY = 9.81
DP_CART_MASS = 1.0
DP_MASS1 = 0.1
DP_MASS2 = 0.1
DP_LEN1 = 0.6
DP_LEN2 = 0.6
DP_FORCE = 5.0
DP_DT = 0.02
DP_SUBSTEPS = 4  # RK4 substeps per control step; one step at 0.02 s drifts ~40% in energy
DP_ALIVE_BONUS = 10.0
DP_MIN_TIP_HEIGHT = 0.8 * (DP_LEN1 + DP_LEN2)
DP_POSITION_LIMIT = 1.0


def _dp_mass_matrix(th1: float, th2: float) -> np.ndarray:
    a = DP_MASS1 * DP_LEN1 / 2 + DP_MASS2 * DP_LEN1
    b = DP_MASS2 * DP_LEN2 / 2
    c = DP_MASS2 * DP_LEN1 * DP_LEN2 / 2
    m12 = a * math.cos(th1)
    m13 = b * math.cos(th2)
    m23 = c * math.cos(th1 - th2)
    return np.array([
        [DP_CART_MASS + DP_MASS1 + DP_MASS2, m12, m13],
        [m12, DP_MASS1 * DP_LEN1 ** 2 / 3 + DP_MASS2 * DP_LEN1 ** 2, m23],
        [m13, m23, DP_MASS2 * DP_LEN2 ** 2 / 3],
    ])


def _dp_derivative(y: np.ndarray, force: float) -> np.ndarray:
    _, th1, th2, xd, w1, w2 = y
    a = DP_MASS1 * DP_LEN1 / 2 + DP_MASS2 * DP_LEN1
    b = DP_MASS2 * DP_LEN2 / 2
    c = DP_MASS2 * DP_LEN1 * DP_LEN2 / 2
    s12 = math.sin(th1 - th2)
    rhs = np.array([
        force + a * w1 ** 2 * math.sin(th1) + b * w2 ** 2 * math.sin(th2),
        -c * w2 ** 2 * s12 + a * DP_GRAVITY * math.sin(th1),
        c * w1 ** 2 * s12 + b * DP_GRAVITY * math.sin(th2),
    ])
    acc = np.linalg.solve(_dp_mass_matrix(th1, th2), rhs)
    return np.array([xd, w1, w2, acc[0], acc[1], acc[2]])


def double_pendulum_dynamics(state: np.ndarray, action) -> np.ndarray:
    """Advance (x, th1, th2, x_dot, w1, w2) by DP_DT with classical RK4 substeps."""
    force = DP_FORCE * float(np.clip(np.asarray(action).reshape(-1)[0], -1.0, 1.0))
    h = DP_DT / DP_SUBSTEPS
    for _ in range(DP_SUBSTEPS):
        k1 = _dp_derivative(state, force)
        k2 = _dp_derivative(state + 0.5 * h * k1, force)
        k3 = _dp_derivative(state + 0.5 * h * k2, force)
        k4 = _dp_derivative(state + h * k3, force)
        state = state + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return state


def double_pendulum_energy(state: np.ndarray) -> float:
    q_dot = state[3:]
    kinetic = 0.5 * q_dot @ _dp_mass_matrix(state[1], state[2]) @ q_dot
    potential = DP_GRAVITY * (DP_MASS1 * DP_LEN1 / 2 * math.cos(state[1])
                              + DP_MASS2 * (DP_LEN1 * math.cos(state[1])
                                            + DP_LEN2 / 2 * math.cos(state[2])))
    return float(kinetic + potential)


def double_pendulum_tip(state: np.ndarray) -> tuple[float, float]:
    x, th1, th2 = state[:3]
    return (x + DP_LEN1 * math.sin(th1) + DP_LEN2 * math.sin(th2),
            DP_LEN1 * math.cos(th1) + DP_LEN2 * math.cos(th2))


def double_pendulum_observation(state: np.ndarray) -> np.ndarray:
    x, th1, th2, xd, w1, w2 = state
    return np.array([x, math.sin(th1), math.sin(th2), math.cos(th1), math.cos(th2), xd, w1, w2])


def step_double_pendulum(state: np.ndarray, action, t: int = 0, max_steps: int = 1000):
    nxt = double_pendulum_dynamics(state, action)
    tip_x, tip_y = double_pendulum_tip(nxt)
    penalty = 0.01 * tip_x ** 2 + (tip_y - (DP_LEN1 + DP_LEN2)) ** 2
    fallen = tip_y <= DP_MIN_TIP_HEIGHT or abs(nxt[0]) > DP_POSITION_LIMIT
    reward = DP_ALIVE_BONUS - penalty
    return nxt, StepResult(double_pendulum_observation(nxt), float(reward),
                           bool(fallen or t + 1 >= max_steps))


# ---------------------------------------------------------------------------
# bandit

BANDIT_OPTIMUM = 0.3


def bandit_reward(action) -> float:
    a = float(np.asarray(action, dtype=np.float64).reshape(-1)[0])
    return 1.0 - (a - BANDIT_OPTIMUM) ** 2


def step_bandit(action) -> StepResult:
    return StepResult(np.zeros(1), bandit_reward(action), True)


# ---------------------------------------------------------------------------
# stateful wrappers


class Env:
    spec: EnvSpec
    equilibrium: np.ndarray

    def __init__(self, max_steps: int | None = None):
        if max_steps is not None:
            self.spec = EnvSpec(self.spec.obs_dim, self.spec.action_dim, max_steps,
                                self.spec.reward_bound)
        self.state = self.equilibrium.copy()
        self.t = 0

    def reset(self, seed: int | None = None) -> np.ndarray:
        rng = np.random.default_rng(seed)
        self.state = self.equilibrium + rng.uniform(-RESET_NOISE, RESET_NOISE, self.equilibrium.shape)
        self.t = 0
        return self.observe()

    def observe(self) -> np.ndarray:
        raise NotImplementedError

    def step(self, action) -> StepResult:
        raise NotImplementedError


class CartPoleEnv(Env):
    spec = EnvSpec(obs_dim=5, action_dim=1, max_steps=1000, reward_bound=1.0)
    equilibrium = np.zeros(4)

    def observe(self):
        return cartpole_observation(self.state)

    def step(self, action):
        self.state, result = step_cartpole(self.state, action, self.t, self.spec.max_steps)
        self.t += 1
        return result


class DoublePendulumEnv(Env):
    spec = EnvSpec(obs_dim=8, action_dim=1, max_steps=1000, reward_bound=DP_ALIVE_BONUS)
    equilibrium = np.zeros(6)

    def observe(self):
        return double_pendulum_observation(self.state)

    def step(self, action):
        self.state, result = step_double_pendulum(self.state, action, self.t, self.spec.max_steps)
        self.t += 1
        return result


class BanditEnv(Env):
    spec = EnvSpec(obs_dim=1, action_dim=1, max_steps=1, reward_bound=2.89)
    equilibrium = np.zeros(1)

    def reset(self, seed=None):
        self.t = 0
        return np.zeros(1)

    def observe(self):
        return np.zeros(1)

    def step(self, action):
        self.t += 1
        return step_bandit(action)


ENVIRONMENTS = {
    "cartpole": CartPoleEnv,
    "double_pendulum": DoublePendulumEnv,
    "bandit": BanditEnv,
}


def make_env(key: str, **params) -> Env:
    try:
        cls = ENVIRONMENTS[key]
    except KeyError:
        raise ValueError(f"unknown environment {key!r}; choose from {sorted(ENVIRONMENTS)}") from None
    return cls(**params)


def max_transformed_value(reward_bound: float, discount: float, max_steps: int | None = None) -> float:
    """Upper bound on |h(return)| for per-step rewards bounded by ``reward_bound``."""
    from .model import transform_scalar
    if max_steps is not None:
        horizon = sum(discount ** i for i in range(max_steps))
    else:
        horizon = 1.0 / (1.0 - discount) if discount < 1.0 else math.inf
    return float(transform_scalar(reward_bound * horizon))
