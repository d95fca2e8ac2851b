"""depthnav: depth-conditioned drone navigation with latent-space transfer.

Train a PPO policy on rendered ground-truth depth in a built-in quadrotor
simulator, degrade depth to stereo-like input, and recover navigation
performance by adversarially refining the encoder alone.
"""

__version__ = "0.1.0"
