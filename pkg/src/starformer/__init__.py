"""STaRFormer sequence classification toolkit."""
