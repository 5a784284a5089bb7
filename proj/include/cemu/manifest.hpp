#pragma once

// Run manifests: what was run, with which configuration and seed, and a SHA-256
// digest of every file read or written. Timestamps are recorded but never digested.

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace cemu {

using ojson = nlohmann::ordered_json;

struct FileRecord {
    std::string role;           ///< e.g. "shard", "weights", "loss_csv"
    std::string path;           ///< absolute
    std::string flag;           ///< CLI option that named the file, empty when derived from another path
    std::string sha256;         ///< digest of the bytes on disk
    std::string stable_sha256;  ///< digest with run-time columns removed; empty when identical to sha256
};

struct RunManifest {
    std::string command;
    std::vector<std::string> argv;  ///< canonical arguments, paths absolute
    ojson config;                   ///< echo of flags and parsed config files
    std::uint64_t seed = 0;
    std::string version;
    std::string started, finished;  ///< UTC, ISO 8601
    std::vector<FileRecord> inputs, outputs;
    ojson extra = ojson::object();
};

std::string sha256_hex(std::string_view bytes);
/// Throws IoError when the file cannot be read.
std::string sha256_file(const std::filesystem::path& path);
/// Digest of a CSV file after dropping the named columns from every line.
std::string sha256_csv_without(const std::filesystem::path& path, const std::vector<std::string>& columns);

std::string utc_timestamp();

ojson to_json(const RunManifest& m);
RunManifest manifest_from_json(const ojson& j);
void write_manifest(const std::filesystem::path& path, const RunManifest& m);
RunManifest read_manifest(const std::filesystem::path& path);

FileRecord file_record(std::string role, const std::filesystem::path& path, std::string flag = {});

}  // namespace cemu
