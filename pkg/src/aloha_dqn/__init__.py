"""Slotted-ALOHA random access with a parameter-shared DQN transmission policy."""

__version__ = "0.1.0"
