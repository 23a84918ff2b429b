# Test suite for the XVA engine
