#include "psteer/captions.hpp"

#include "psteer/audit.hpp"
#include "psteer/errors.hpp"

#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

namespace psteer::captions {

namespace {

// Lowercase, trim, collapse internal whitespace runs to single spaces.
std::string collapse(const std::string& s) {
    std::string out;
    out.reserve(s.size());
    bool pending_space = false;
    for (unsigned char ch : s) {
        if (std::isspace(ch)) {
            pending_space = !out.empty();
            continue;
        }
        if (pending_space) {
            out += ' ';
            pending_space = false;
        }
        out += static_cast<char>(std::tolower(ch));
    }
    return out;
}

std::vector<std::string> tokens_of(const std::string& s) {
    std::vector<std::string> toks;
    std::istringstream in(s);
    std::string t;
    while (in >> t) {
        toks.push_back(t);
    }
    return toks;
}

} // namespace

SynonymTable::SynonymTable(std::map<std::string, std::vector<std::string>> mapping) {
    // Canonicals first, so the variant-shadows-canonical check below sees the
    // full canonical set regardless of map order.
    std::map<std::string, bool> is_canonical;
    for (const auto& [canonical, variants] : mapping) {
        (void)variants;
        const std::string c = collapse(canonical);
        if (c.empty()) {
            throw ConfigError("synonym table: empty canonical term");
        }
        is_canonical[c] = true;
    }
    for (const auto& [canonical, variants] : mapping) {
        const std::string c = collapse(canonical);
        for (const auto& raw_variant : variants) {
            const std::string v = collapse(raw_variant);
            if (v.empty()) {
                throw ConfigError("synonym table: empty variant for '" + c + "'");
            }
            if (is_canonical.count(v) > 0) {
                throw ConfigError("synonym table: '" + v +
                                  "' is both a canonical and a variant");
            }
            const auto [it, inserted] = variant_to_canonical_.emplace(v, c);
            if (!inserted && it->second != c) {
                throw ConfigError("synonym table: variant '" + v +
                                  "' maps to two canonicals");
            }
        }
    }
}

SynonymTable read_synonyms_file(const std::filesystem::path& path) {
    audit::record_file_open(path.string());
    std::ifstream f(path);
    if (!f) {
        throw IoError("cannot open: " + path.string());
    }
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(f);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("synonym file: " + std::string(e.what()));
    }
    if (!j.is_object()) {
        throw SchemaError("synonym file: top level must be an object");
    }
    std::map<std::string, std::vector<std::string>> mapping;
    for (const auto& [canonical, variants] : j.items()) {
        if (!variants.is_array()) {
            throw SchemaError("synonym file: variants of '" + canonical +
                              "' must be an array");
        }
        std::vector<std::string> vs;
        for (const auto& v : variants) {
            if (!v.is_string()) {
                throw SchemaError("synonym file: non-string variant under '" +
                                  canonical + "'");
            }
            vs.push_back(v.get<std::string>());
        }
        mapping[canonical] = std::move(vs);
    }
    return SynonymTable(std::move(mapping));
}

void validate_policy(const FilterPolicy& policy) {
    if (policy.banned.empty()) {
        throw ConfigError("filter policy needs at least one banned substring");
    }
    if (policy.max_field_len == 0) {
        throw ConfigError("filter policy max_field_len must be positive");
    }
    for (const auto& b : policy.banned) {
        if (b.empty()) {
            throw ConfigError("filter policy: empty banned substring");
        }
    }
}

FilterPolicy read_policy_file(const std::filesystem::path& path) {
    audit::record_file_open(path.string());
    std::ifstream f(path);
    if (!f) {
        throw IoError("cannot open: " + path.string());
    }
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(f);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("policy file: " + std::string(e.what()));
    }
    FilterPolicy p;
    try {
        p.banned = j.at("banned").get<std::vector<std::string>>();
        if (j.contains("max_field_len")) {
            p.max_field_len = j.at("max_field_len").get<std::size_t>();
        }
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError("policy file: " + std::string(e.what()));
    }
    validate_policy(p);
    return p;
}

CaptionRecord parse_caption(const std::string& raw, const std::string& source_id) {
    nlohmann::json j;
    try {
        // Strict mode: the whole stream must be one JSON value; leading prose
        // or trailing garbage fails the parse.
        j = nlohmann::json::parse(raw);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("caption " + source_id + ": " + e.what());
    }
    if (!j.is_object()) {
        throw SchemaError("caption " + source_id + ": top level must be an object");
    }
    if (j.size() != 3 || !j.contains("where") || !j.contains("when") ||
        !j.contains("weather")) {
        throw SchemaError("caption " + source_id +
                          ": exactly the keys where/when/weather are required");
    }
    CaptionRecord rec;
    rec.source_id = source_id;
    const auto field = [&](const char* key) {
        const auto& v = j.at(key);
        if (!v.is_string()) {
            throw SchemaError("caption " + source_id + ": '" + key +
                              "' must be a string");
        }
        const std::string c = collapse(v.get<std::string>());
        if (c.empty()) {
            throw SchemaError("caption " + source_id + ": '" + key + "' is empty");
        }
        return c;
    };
    rec.where = field("where");
    rec.when = field("when");
    rec.weather = field("weather");
    return rec;
}

std::string normalize_field(const std::string& field, const SynonymTable& table) {
    const auto& map = table.variant_to_canonical();
    std::string cur = collapse(field);
    if (map.empty()) {
        return cur;
    }

    std::size_t longest = 1;
    for (const auto& [variant, canonical] : map) {
        (void)canonical;
        longest = std::max(longest, tokens_of(variant).size());
    }

    // Single left-to-right pass: at each token, try the longest phrase first.
    // Replacements can splice a canonical against following tokens into a new
    // variant phrase, so iterate to a fixpoint; sane tables converge in one
    // or two passes, and a table that keeps rewriting itself is a config bug.
    for (int round = 0; round < 8; ++round) {
        const auto toks = tokens_of(cur);
        std::string next;
        std::size_t i = 0;
        while (i < toks.size()) {
            std::size_t matched_len = 0;
            const std::string* canonical = nullptr;
            std::string phrase;
            for (std::size_t len = std::min(longest, toks.size() - i); len >= 1;
                 --len) {
                phrase.clear();
                for (std::size_t k = 0; k < len; ++k) {
                    if (k > 0) {
                        phrase += ' ';
                    }
                    phrase += toks[i + k];
                }
                const auto it = map.find(phrase);
                if (it != map.end()) {
                    matched_len = len;
                    canonical = &it->second;
                    break;
                }
            }
            if (!next.empty()) {
                next += ' ';
            }
            if (canonical != nullptr) {
                next += *canonical;
                i += matched_len;
            } else {
                next += toks[i];
                i += 1;
            }
        }
        if (next == cur) {
            return cur;
        }
        cur = std::move(next);
    }
    throw ConfigError("synonym table does not reach a fixpoint on: " + field);
}

CaptionRecord normalize(const CaptionRecord& rec, const SynonymTable& table) {
    CaptionRecord out = rec;
    out.where = normalize_field(rec.where, table);
    out.when = normalize_field(rec.when, table);
    out.weather = normalize_field(rec.weather, table);
    return out;
}

FilterResult filter(const std::vector<CaptionRecord>& records,
                    const FilterPolicy& policy) {
    validate_policy(policy);
    FilterResult res;
    for (const auto& rec : records) {
        const std::array<std::pair<const char*, const std::string*>, 3> fields = {
            {{"where", &rec.where}, {"when", &rec.when}, {"weather", &rec.weather}}};
        std::string reason;
        for (const auto& banned : policy.banned) {
            for (const auto& [name, value] : fields) {
                (void)name;
                if (value->find(banned) != std::string::npos) {
                    reason = "banned:" + banned;
                    break;
                }
            }
            if (!reason.empty()) {
                break;
            }
        }
        if (reason.empty()) {
            for (const auto& [name, value] : fields) {
                if (value->size() > policy.max_field_len) {
                    reason = std::string("length:") + name;
                    break;
                }
            }
        }
        if (reason.empty()) {
            res.kept.push_back(rec);
        } else {
            res.rejected.push_back({rec, std::move(reason)});
        }
    }
    return res;
}

enc::PromptString assemble_prompt(const CaptionRecord& rec) {
    return enc::PromptString("an aerial view of " + rec.where + " " + rec.when +
                             " in " + rec.weather);
}

std::vector<RawCaption> read_raw_captions(const std::filesystem::path& path) {
    audit::record_file_open(path.string());
    std::ifstream f(path);
    if (!f) {
        throw IoError("cannot open: " + path.string());
    }
    std::vector<RawCaption> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(f, line)) {
        ++line_no;
        if (line.empty()) {
            continue;
        }
        try {
            const auto j = nlohmann::json::parse(line);
            out.push_back({j.at("source_id").get<std::string>(),
                           j.at("raw").get<std::string>()});
        } catch (const nlohmann::json::exception& e) {
            throw ParseError("raw captions " + path.string() + " line " +
                             std::to_string(line_no) + ": " + e.what());
        }
    }
    return out;
}

namespace {

void write_jsonl(const std::filesystem::path& path,
                 const std::vector<nlohmann::json>& lines) {
    std::ofstream f(path, std::ios::binary);
    if (!f) {
        throw IoError("cannot open for write: " + path.string());
    }
    for (const auto& j : lines) {
        f << j.dump() << "\n";
    }
    if (!f) {
        throw IoError("write failed: " + path.string());
    }
}

} // namespace

void write_records_file(const std::filesystem::path& path,
                        const std::vector<CaptionRecord>& records) {
    std::vector<nlohmann::json> lines;
    lines.reserve(records.size());
    for (const auto& r : records) {
        lines.push_back({{"source_id", r.source_id},
                         {"where", r.where},
                         {"when", r.when},
                         {"weather", r.weather}});
    }
    write_jsonl(path, lines);
}

void write_rejections_file(const std::filesystem::path& path,
                           const std::vector<Rejection>& rejections) {
    std::vector<nlohmann::json> lines;
    lines.reserve(rejections.size());
    for (const auto& r : rejections) {
        lines.push_back({{"source_id", r.record.source_id},
                         {"reason", r.reason},
                         {"where", r.record.where},
                         {"when", r.record.when},
                         {"weather", r.record.weather}});
    }
    write_jsonl(path, lines);
}

} // namespace psteer::captions
