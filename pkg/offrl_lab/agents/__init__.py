"""Offline RL agents: BC, TD3+BC and BEAR-QL, with gradient-penalty and constraint-relaxation plugins"""
