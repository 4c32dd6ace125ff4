# Test suite for the noisy transition loss toolkit
