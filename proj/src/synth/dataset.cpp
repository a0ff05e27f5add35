// SPDX-License-Identifier: Apache-2.0

#include "tape/synth/dataset.hpp"

#include <openssl/evp.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <memory>
#include <sstream>

#include "tape/numeric/errors.hpp"
#include "tape/numeric/rng.hpp"

namespace tape::synth {

namespace fs = std::filesystem;

namespace {

std::vector<std::uint8_t> read_bytes(const fs::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot read " + path.string());
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

std::string index_csv(const std::vector<IndexEntry>& index) {
    std::ostringstream os;
    os << "filename,pathology,split,seed\n";
    for (const auto& e : index)
        os << e.filename << ',' << pathology_name(e.pathology) << ',' << split_name(e.split) << ',' << e.seed << '\n';
    return os.str();
}

std::vector<IndexEntry> parse_index(const std::string& text, const fs::path& where) {
    std::istringstream is(text);
    std::string line;
    if (!std::getline(is, line) || line != "filename,pathology,split,seed")
        throw FormatError(where.string() + ": unexpected index header");
    std::vector<IndexEntry> out;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string name, path, split, seed;
        if (!std::getline(ls, name, ',') || !std::getline(ls, path, ',') || !std::getline(ls, split, ',') ||
            !std::getline(ls, seed))
            throw FormatError(where.string() + ": malformed row '" + line + "'");
        IndexEntry e;
        e.filename = name;
        try {
            e.pathology = parse_pathology(path);
            e.split = parse_split(split);
            e.seed = std::stoull(seed);
        } catch (const std::exception& ex) {
            throw FormatError(where.string() + ": " + ex.what());
        }
        out.push_back(std::move(e));
    }
    return out;
}

}  // namespace

std::string_view split_name(Split s) {
    switch (s) {
        case Split::Train: return "train";
        case Split::Val: return "val";
        case Split::Test: return "test";
    }
    return "unknown";
}

Split parse_split(std::string_view name) {
    for (auto s : {Split::Train, Split::Val, Split::Test})
        if (split_name(s) == name) return s;
    throw ConfigError("unknown split '" + std::string(name) + "'");
}

SplitCounts split_counts(std::int64_t n) {
    if (n < 5) throw ConfigError("n_per_class must be at least 5, got " + std::to_string(n));
    SplitCounts c;
    c.test = std::max<std::int64_t>(1, std::llround(0.2 * static_cast<double>(n)));
    c.val = std::max<std::int64_t>(1, std::llround(0.1 * static_cast<double>(n)));
    c.train = n - c.val - c.test;
    return c;
}

std::vector<IndexEntry> plan_dataset(const DatasetSpec& spec) {
    const auto counts = split_counts(spec.n_per_class);
    Rng rng(spec.seed);
    std::vector<IndexEntry> out;
    std::int64_t idx = 0;
    for (auto p : kAllPathologies) {
        for (std::int64_t i = 0; i < spec.n_per_class; ++i, ++idx) {
            IndexEntry e;
            char name[32];
            std::snprintf(name, sizeof(name), "sample_%05lld.timg", static_cast<long long>(idx));
            e.filename = name;
            e.pathology = p;
            e.split = i < counts.train ? Split::Train : (i < counts.train + counts.val ? Split::Val : Split::Test);
            e.seed = rng.next_u64();
            out.push_back(std::move(e));
        }
    }
    return out;
}

std::string sha256_hex(std::span<const std::uint8_t> bytes) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1)
        throw NumericError("SHA-256 digest failed");
    static constexpr char hex[] = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
        out += hex[digest[i] >> 4];
        out += hex[digest[i] & 0xf];
    }
    return out;
}

std::string compute_fingerprint(const fs::path& dir, const std::vector<IndexEntry>& index) {
    const auto csv = index_csv(index);
    std::string acc(csv);
    for (const auto& e : index) {
        acc += sha256_hex(read_bytes(dir / e.filename));
        acc += '\n';
    }
    return sha256_hex({reinterpret_cast<const std::uint8_t*>(acc.data()), acc.size()});
}

std::string gen_dataset(const fs::path& dir, const DatasetSpec& spec, bool overwrite) {
    if (spec.height < min_phantom_height() || spec.width < 1)
        throw ConfigError("dataset image size " + std::to_string(spec.height) + "x" + std::to_string(spec.width) +
                          " is too small");
    const auto index = plan_dataset(spec);
    if (fs::exists(dir)) {
        if (!fs::is_directory(dir)) throw IoError(dir.string() + " exists and is not a directory");
        if (!fs::is_empty(dir) && !overwrite)
            throw IoError(dir.string() + " already exists and is not empty (use --force to overwrite)");
    }
    fs::create_directories(dir);
    for (const auto& e : index) save_sample(gen_phantom(e.seed, e.pathology, spec.height, spec.width), dir / e.filename);
    {
        std::ofstream f(dir / "index.csv", std::ios::trunc);
        if (!f) throw IoError("cannot write " + (dir / "index.csv").string());
        f << index_csv(index);
    }
    const auto fp = compute_fingerprint(dir, index);
    std::ofstream f(dir / "fingerprint.txt", std::ios::trunc);
    if (!f) throw IoError("cannot write " + (dir / "fingerprint.txt").string());
    f << fp << '\n';
    return fp;
}

std::vector<std::size_t> Dataset::indices(Split split) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < index.size(); ++i)
        if (index[i].split == split) out.push_back(i);
    return out;
}

Dataset load_dataset(const fs::path& dir) {
    const auto index_path = dir / "index.csv";
    if (!fs::exists(index_path)) throw IoError("dataset index not found: " + index_path.string());
    const auto raw = read_bytes(index_path);
    Dataset ds;
    ds.dir = dir;
    ds.index = parse_index(std::string(raw.begin(), raw.end()), index_path);
    if (ds.index.empty()) throw FormatError(index_path.string() + ": no samples");
    for (const auto& e : ds.index) {
        auto s = load_sample(dir / e.filename);
        if (s.pathology != e.pathology || s.seed != e.seed)
            throw FormatError(e.filename + ": header disagrees with index.csv");
        ds.samples.push_back(std::move(s));
    }
    ds.fingerprint = compute_fingerprint(dir, ds.index);
    const auto fp_path = dir / "fingerprint.txt";
    if (fs::exists(fp_path)) {
        std::ifstream f(fp_path);
        std::string stored;
        f >> stored;
        if (stored != ds.fingerprint)
            throw FormatError(fp_path.string() + ": stored fingerprint does not match dataset contents");
    }
    return ds;
}

}  // namespace tape::synth
