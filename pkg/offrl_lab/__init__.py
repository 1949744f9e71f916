"""Desk-scale offline RL lab: TD3+BC and BEAR-QL with gradient penalty and constraint relaxation plugins"""

__version__ = "0.1.0"
