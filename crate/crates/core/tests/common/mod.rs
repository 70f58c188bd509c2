pub mod backbone_oracle;
