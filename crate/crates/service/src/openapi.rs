use serde_json::{json, Value};

fn png(description: &str) -> Value {
    json!({ "type": "string", "format": "byte", "description": description })
}

fn error_response(description: &str) -> Value {
    json!({
        "description": description,
        "content": { "application/json": { "schema": { "$ref": "#/components/schemas/Error" } } }
    })
}

/// OpenAPI 3.0 description of the `/v1` endpoints.
pub fn document() -> Value {
    json!({
        "openapi": "3.0.3",
        "info": {
            "title": "gclab inference service",
            "version": env!("CARGO_PKG_VERSION"),
            "description": "Guided image completion. Images, masks and label maps travel as base64 PNG."
        },
        "components": {
            "securitySchemes": {
                "apiKey": { "type": "apiKey", "in": "header", "name": "x-api-key" }
            },
            "schemas": {
                "Error": {
                    "type": "object",
                    "required": ["error"],
                    "properties": {
                        "error": {
                            "type": "object",
                            "required": ["status", "field", "message"],
                            "properties": {
                                "status": { "type": "integer" },
                                "field": { "type": "string", "description": "Name of the offending input" },
                                "message": { "type": "string" }
                            }
                        }
                    }
                },
                "CompleteRequest": {
                    "type": "object",
                    "required": ["image", "mask", "guidance_kind"],
                    "properties": {
                        "image": png("8-bit RGB PNG"),
                        "mask": png("8-bit gray PNG, 255 marks the hole"),
                        "guidance_kind": { "type": "string", "enum": ["edge", "semantic", "panoptic", "none"] },
                        "guidance": png("edge map (0/255) or semantic class-index PNG"),
                        "instances": png("16-bit instance-id PNG, panoptic only"),
                        "model": { "type": "string", "description": "Model tag; defaults to the first model of the requested kind" }
                    }
                },
                "CompleteResponse": {
                    "type": "object",
                    "required": ["image", "model", "elapsed_ms"],
                    "properties": {
                        "image": png("completed RGB PNG"),
                        "model": { "type": "string" },
                        "elapsed_ms": { "type": "integer" },
                        "semantic": png("predicted semantic map (guidance_kind none)"),
                        "instances": png("predicted instance map (guidance_kind none)")
                    }
                },
                "SegmentRequest": {
                    "type": "object",
                    "required": ["image"],
                    "properties": {
                        "image": png("8-bit RGB PNG"),
                        "mask": png("optional hole mask")
                    }
                },
                "SegmentResponse": {
                    "type": "object",
                    "required": ["semantic", "instances", "segmenter"],
                    "properties": {
                        "semantic": png("class-index PNG"),
                        "instances": png("16-bit instance-id PNG, ids 0..n"),
                        "segmenter": { "type": "string" }
                    }
                }
            }
        },
        "paths": {
            "/v1/complete": {
                "post": {
                    "summary": "Complete the masked region of an image",
                    "security": [{ "apiKey": [] }],
                    "requestBody": {
                        "required": true,
                        "content": { "application/json": { "schema": { "$ref": "#/components/schemas/CompleteRequest" } } }
                    },
                    "responses": {
                        "200": {
                            "description": "Completed image",
                            "content": { "application/json": { "schema": { "$ref": "#/components/schemas/CompleteResponse" } } }
                        },
                        "400": error_response("Malformed payload"),
                        "401": error_response("Missing or wrong API key"),
                        "413": error_response("Payload above the size cap"),
                        "422": error_response("Shape or channel mismatch"),
                        "501": error_response("Automatic pipeline without a segmenter"),
                        "503": error_response("Model not loaded")
                    }
                }
            },
            "/v1/segment": {
                "post": {
                    "summary": "Predict a panoptic layout",
                    "security": [{ "apiKey": [] }],
                    "requestBody": {
                        "required": true,
                        "content": { "application/json": { "schema": { "$ref": "#/components/schemas/SegmentRequest" } } }
                    },
                    "responses": {
                        "200": {
                            "description": "Semantic and instance maps",
                            "content": { "application/json": { "schema": { "$ref": "#/components/schemas/SegmentResponse" } } }
                        },
                        "400": error_response("Malformed payload"),
                        "401": error_response("Missing or wrong API key"),
                        "413": error_response("Payload above the size cap"),
                        "422": error_response("Shape mismatch"),
                        "501": error_response("No segmenter configured")
                    }
                }
            },
            "/v1/meta": {
                "get": {
                    "summary": "Loaded models, classes and guidance kinds",
                    "responses": { "200": { "description": "Service metadata" } }
                }
            },
            "/v1/openapi": {
                "get": {
                    "summary": "This document",
                    "responses": { "200": { "description": "OpenAPI document" } }
                }
            }
        }
    })
}
