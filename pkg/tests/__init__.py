# Tests for adaptrack
