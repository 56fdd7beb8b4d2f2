// Placeholder, replaced by the acceptance suite.
