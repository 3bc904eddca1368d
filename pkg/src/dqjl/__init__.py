"""Dynamic queue-jump lane coordination with deep Q-learning.

Modules:

* :mod:`dqjl.env` -- two-lane road MDP (state, transition, reward, collisions)
* :mod:`dqjl.scenario` -- random initial road environments
* :mod:`dqjl.net` -- numpy Q-network, backpropagation, Adam, checkpoints
* :mod:`dqjl.agent` -- replay buffer, epsilon-greedy, DQN/DDQN/dueling/3DQN training
* :mod:`dqjl.rollout` -- yielding time indicators, EMV passing time, sweeps
* :mod:`dqjl.cli` -- command-line entry point
"""

__version__ = "0.1.0"
