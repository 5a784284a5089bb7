#include "cemu/manifest.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <array>
#include <ctime>
#include <fstream>
#include <memory>
#include <sstream>

#include "cemu/array.hpp"

namespace cemu {

namespace {

class Sha256 {
public:
    Sha256() : ctx_(EVP_MD_CTX_new(), EVP_MD_CTX_free) {
        if (!ctx_ || EVP_DigestInit_ex(ctx_.get(), EVP_sha256(), nullptr) != 1) throw std::runtime_error("SHA-256 init failed");
    }
    void update(const void* data, std::size_t n) {
        if (EVP_DigestUpdate(ctx_.get(), data, n) != 1) throw std::runtime_error("SHA-256 update failed");
    }
    std::string hex() {
        std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
        unsigned int len = 0;
        if (EVP_DigestFinal_ex(ctx_.get(), md.data(), &len) != 1) throw std::runtime_error("SHA-256 final failed");
        static constexpr char digits[] = "0123456789abcdef";
        std::string out;
        for (unsigned int i = 0; i < len; ++i) {
            out += digits[md[i] >> 4];
            out += digits[md[i] & 15];
        }
        return out;
    }

private:
    std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx_;
};

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream in(line);
    while (std::getline(in, cell, ',')) out.push_back(cell);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

ojson file_json(const FileRecord& f) {
    ojson j{{"role", f.role}, {"path", f.path}, {"sha256", f.sha256}};
    if (!f.flag.empty()) j["flag"] = f.flag;
    if (!f.stable_sha256.empty()) j["stable_sha256"] = f.stable_sha256;
    return j;
}

FileRecord file_from_json(const ojson& j) {
    FileRecord f;
    f.role = j.at("role").get<std::string>();
    f.path = j.at("path").get<std::string>();
    f.sha256 = j.at("sha256").get<std::string>();
    f.flag = j.value("flag", std::string{});
    f.stable_sha256 = j.value("stable_sha256", std::string{});
    return f;
}

}  // namespace

std::string sha256_hex(std::string_view bytes) {
    Sha256 h;
    h.update(bytes.data(), bytes.size());
    return h.hex();
}

std::string sha256_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path.string());
    Sha256 h;
    std::array<char, 1 << 16> buf{};
    while (in) {
        in.read(buf.data(), buf.size());
        if (in.gcount() > 0) h.update(buf.data(), static_cast<std::size_t>(in.gcount()));
    }
    if (in.bad()) throw IoError("failed reading " + path.string());
    return h.hex();
}

std::string sha256_csv_without(const std::filesystem::path& path, const std::vector<std::string>& columns) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path.string());
    std::string line;
    std::vector<bool> keep;
    Sha256 h;
    bool first = true;
    while (std::getline(in, line)) {
        const auto cells = split_csv(line);
        if (first) {
            for (const auto& c : cells) keep.push_back(std::find(columns.begin(), columns.end(), c) == columns.end());
            first = false;
        }
        std::string kept;
        for (std::size_t i = 0; i < cells.size(); ++i) {
            if (i < keep.size() && !keep[i]) continue;
            if (!kept.empty()) kept += ',';
            kept += cells[i];
        }
        kept += '\n';
        h.update(kept.data(), kept.size());
    }
    return h.hex();
}

std::string utc_timestamp() {
    const std::time_t now = std::time(nullptr);
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

ojson to_json(const RunManifest& m) {
    ojson j;
    j["command"] = m.command;
    j["argv"] = m.argv;
    j["config"] = m.config;
    j["seed"] = m.seed;
    j["version"] = m.version;
    j["started"] = m.started;
    j["finished"] = m.finished;
    j["inputs"] = ojson::array();
    for (const auto& f : m.inputs) j["inputs"].push_back(file_json(f));
    j["outputs"] = ojson::array();
    for (const auto& f : m.outputs) j["outputs"].push_back(file_json(f));
    j["extra"] = m.extra;
    return j;
}

RunManifest manifest_from_json(const ojson& j) {
    RunManifest m;
    m.command = j.at("command").get<std::string>();
    m.argv = j.at("argv").get<std::vector<std::string>>();
    m.config = j.value("config", ojson::object());
    m.seed = j.at("seed").get<std::uint64_t>();
    m.version = j.value("version", std::string{});
    m.started = j.value("started", std::string{});
    m.finished = j.value("finished", std::string{});
    for (const auto& f : j.value("inputs", ojson::array())) m.inputs.push_back(file_from_json(f));
    for (const auto& f : j.value("outputs", ojson::array())) m.outputs.push_back(file_from_json(f));
    m.extra = j.value("extra", ojson::object());
    return m;
}

void write_manifest(const std::filesystem::path& path, const RunManifest& m) {
    // Write next to the target and rename, so an interrupted run never leaves a torn manifest.
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
        out << to_json(m).dump(2) << '\n';
        if (!out) throw IoError("failed writing " + tmp.string());
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoError("cannot move manifest into place at " + path.string() + ": " + ec.message());
}

RunManifest read_manifest(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read manifest " + path.string());
    try {
        return manifest_from_json(ojson::parse(in));
    } catch (const nlohmann::json::exception& e) {
        throw IoError("malformed manifest " + path.string() + ": " + e.what());
    }
}

FileRecord file_record(std::string role, const std::filesystem::path& path, std::string flag) {
    FileRecord f;
    f.role = std::move(role);
    f.path = std::filesystem::absolute(path).lexically_normal().string();
    f.flag = std::move(flag);
    f.sha256 = sha256_file(path);
    return f;
}

}  // namespace cemu
