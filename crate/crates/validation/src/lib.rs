//! Holds the `acceptance` test target, which checks the engine end to end.
