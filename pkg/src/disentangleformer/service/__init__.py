"""HTTP service wrapping the package: pydantic request/response schemas, the
shared operation handlers, and the FastAPI app. The CLI drives the same
handlers in-process or over HTTP."""
