# Test for the library
