"""Loss-resilient token video transport simulator."""
