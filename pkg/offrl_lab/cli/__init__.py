"""Command line surface: run configs, run-directory writers and the offrl-lab commands"""
