"""Test suite for patchlab."""
