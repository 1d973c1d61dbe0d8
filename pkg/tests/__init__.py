# Tests for protoseg
