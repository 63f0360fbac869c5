"""Utils package for PipeDesk Google integration."""
