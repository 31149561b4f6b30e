"""Integration tests for mfa-replay"""
