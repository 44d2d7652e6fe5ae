// Copyright (c) 2026 moeprune authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "dtype.hpp"
#include "tensor.hpp"

namespace moeprune {

// One tensor entry parsed from a shard header. Offsets are relative to the
// shard's data block (directly as stored in the header JSON).
struct TensorMeta {
    std::string name;
    Dtype dtype = Dtype::F32;
    std::vector<size_t> shape;
    uint64_t begin = 0;
    uint64_t end = 0;
    std::string shard;  // shard filename this entry lives in

    size_t numel() const;
    uint64_t payload_bytes() const { return end - begin; }
};

struct ShardHeader {
    std::vector<TensorMeta> tensors;  // in header JSON order
    uint64_t data_offset = 0;         // absolute file offset of the data block
};

// Parse and validate the 8-byte length prefix + JSON header of one shard.
ShardHeader read_header(const std::filesystem::path& file);

// Read access to a checkpoint: a single .safetensors file, a directory
// containing model.safetensors, or a sharded directory with
// model.safetensors.index.json. Tensor reads use pread on per-shard
// descriptors, so distinct ranges can be fetched from multiple threads.
class CheckpointReader {
public:
    explicit CheckpointReader(const std::filesystem::path& dir_or_file);
    ~CheckpointReader();
    CheckpointReader(const CheckpointReader&) = delete;
    CheckpointReader& operator=(const CheckpointReader&) = delete;

    const std::vector<std::string>& names() const { return order_; }
    bool contains(const std::string& name) const;
    const TensorMeta& meta(const std::string& name) const;

    std::vector<std::byte> read_raw(const std::string& name) const;
    std::vector<float> read_values(const std::string& name) const;
    // Decode as a matrix; 1-D tensors come back as a single row.
    Tensor2D read_tensor2d(const std::string& name) const;

    uint64_t total_payload_bytes() const;
    bool sharded() const { return sharded_; }
    const std::filesystem::path& root() const { return root_; }

private:
    struct Shard;
    void add_shard(const std::filesystem::path& file);

    std::filesystem::path root_;
    bool sharded_ = false;
    std::vector<std::unique_ptr<Shard>> shards_;
    std::vector<std::string> order_;
    std::unordered_map<std::string, std::pair<size_t, size_t>> index_;  // name -> (shard, entry)
};

// Writes a checkpoint in two phases: register every tensor first (which fixes
// the shard assignment and all offsets), then stream payloads in the same
// order. Greedy packing: a shard is closed when adding the next tensor would
// exceed `shard_limit` bytes of payload (0 = no limit, single shard).
class CheckpointWriter {
public:
    CheckpointWriter(std::filesystem::path dir, uint64_t shard_limit = 0,
                     std::string basename = "model");

    void register_tensor(const std::string& name, Dtype dtype, std::vector<size_t> shape);
    void finalize_layout();
    void write(const std::string& name, std::span<const std::byte> bytes);
    void finish();

private:
    struct Pending {
        std::string name;
        Dtype dtype;
        std::vector<size_t> shape;
        uint64_t bytes;
        size_t shard = 0;
        uint64_t begin = 0;
    };

    std::filesystem::path dir_;
    uint64_t shard_limit_;
    std::string basename_;
    std::vector<Pending> pending_;
    std::unordered_map<std::string, size_t> by_name_;
    size_t num_shards_ = 0;
    bool finalized_ = false;
    size_t next_write_ = 0;
    std::string shard_filename(size_t idx) const;
};

// Convenience wrapper for small fixtures: everything in memory, one call.
struct TensorSpec {
    std::string name;
    Dtype dtype;
    std::vector<size_t> shape;
    std::vector<std::byte> bytes;
};
void write_checkpoint(const std::vector<TensorSpec>& tensors,
                      const std::filesystem::path& dir, uint64_t shard_limit = 0);

} // namespace moeprune
