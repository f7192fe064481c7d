// Copyright (c) 2026 ssmalign contributors
// SPDX-License-Identifier: Apache-2.0

#include "ssmalign/io.hpp"

#include <bit>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace ssmalign::io {

namespace {

void check_name(const std::string& name) {
    if (name.empty()) throw std::invalid_argument("tensor name must not be empty");
    for (char c : name) {
        const bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') ||
                        (c >= '0' && c <= '9') || c == '_' || c == '.' || c == '-';
        if (!ok)
            throw std::invalid_argument("tensor name '" + name +
                                        "' has characters outside [A-Za-z0-9_.-]");
    }
}

void write_payload(const std::string& path, const std::vector<double>& data) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open " + path + " for writing");
    std::vector<unsigned char> buf(data.size() * 8);
    for (size_t i = 0; i < data.size(); ++i) {
        const auto bits = std::bit_cast<std::uint64_t>(data[i]);
        for (int b = 0; b < 8; ++b)
            buf[i * 8 + b] = static_cast<unsigned char>((bits >> (8 * b)) & 0xff);
    }
    f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!f) throw std::runtime_error("short write to " + path);
}

std::vector<double> read_payload(const std::string& path, std::int64_t expect_count) {
    std::ifstream f(path, std::ios::binary | std::ios::ate);
    if (!f) throw std::runtime_error("cannot open " + path);
    const std::int64_t bytes = static_cast<std::int64_t>(f.tellg());
    if (bytes != expect_count * 8)
        throw std::runtime_error(path + ": payload holds " + std::to_string(bytes) +
                                 " bytes, sidecar shape needs " +
                                 std::to_string(expect_count * 8));
    f.seekg(0);
    std::vector<unsigned char> buf(static_cast<size_t>(bytes));
    f.read(reinterpret_cast<char*>(buf.data()), bytes);
    if (!f) throw std::runtime_error("short read from " + path);
    std::vector<double> data(static_cast<size_t>(expect_count));
    for (size_t i = 0; i < data.size(); ++i) {
        std::uint64_t bits = 0;
        for (int b = 0; b < 8; ++b)
            bits |= static_cast<std::uint64_t>(buf[i * 8 + b]) << (8 * b);
        data[i] = std::bit_cast<double>(bits);
    }
    return data;
}

json load_json(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open " + path);
    json j;
    try {
        f >> j;
    } catch (const json::exception& e) {
        throw std::runtime_error(path + ": " + e.what());
    }
    return j;
}

void write_json(const std::string& path, const json& j) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open " + path + " for writing");
    f << j.dump(2) << '\n';
    if (!f) throw std::runtime_error("short write to " + path);
}

}  // namespace

void save_tensor(const std::string& stem, const Tensor& t, const std::string& name) {
    check_name(name);
    if (!t.defined()) throw std::invalid_argument("save_tensor: undefined tensor '" + name + "'");
    write_payload(stem + ".bin", t.data());
    write_json(stem + ".json", json{{"shape", t.shape()}, {"name", name}});
}

Tensor load_tensor(const std::string& stem, std::string* name_out, bool requires_grad) {
    const json j = load_json(stem + ".json");
    if (!j.contains("shape") || !j.contains("name"))
        throw std::runtime_error(stem + ".json: sidecar needs {shape, name}");
    Shape shape = j.at("shape").get<Shape>();
    if (name_out) *name_out = j.at("name").get<std::string>();
    auto data = read_payload(stem + ".bin", shape_numel(shape));
    return Tensor::from_data(std::move(shape), std::move(data), requires_grad);
}

void save_tensor_map(const std::string& dir,
                     const std::vector<std::pair<std::string, Tensor>>& entries,
                     const std::string& config_json) {
    fs::create_directories(dir);
    json manifest;
    manifest["tensors"] = json::array();
    for (const auto& [name, t] : entries) {
        check_name(name);
        save_tensor((fs::path(dir) / name).string(), t, name);
        manifest["tensors"].push_back(name);
    }
    if (config_json.empty()) {
        manifest["config"] = json::object();
    } else {
        try {
            manifest["config"] = json::parse(config_json);
        } catch (const json::exception& e) {
            throw std::invalid_argument(std::string("save_tensor_map: config echo is not JSON: ") +
                                        e.what());
        }
    }
    write_json((fs::path(dir) / "checkpoint.json").string(), manifest);
}

std::vector<std::pair<std::string, Tensor>> load_tensor_map(const std::string& dir,
                                                            std::string* config_json,
                                                            bool requires_grad) {
    const json manifest = load_json((fs::path(dir) / "checkpoint.json").string());
    if (!manifest.contains("tensors"))
        throw std::runtime_error(dir + "/checkpoint.json: missing tensors list");
    std::vector<std::pair<std::string, Tensor>> out;
    for (const auto& jn : manifest.at("tensors")) {
        const std::string name = jn.get<std::string>();
        std::string stored;
        Tensor t = load_tensor((fs::path(dir) / name).string(), &stored, requires_grad);
        if (stored != name)
            throw std::runtime_error(dir + ": manifest entry '" + name +
                                     "' names a sidecar labelled '" + stored + "'");
        out.emplace_back(name, std::move(t));
    }
    if (config_json) *config_json = manifest.value("config", json::object()).dump();
    return out;
}

std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.12g", v);
    return buf;
}

}  // namespace ssmalign::io
