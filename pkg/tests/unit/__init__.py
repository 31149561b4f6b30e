"""Unit tests for mfa-replay"""
