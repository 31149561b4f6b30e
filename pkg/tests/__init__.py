"""Test suite for mfa-replay"""
