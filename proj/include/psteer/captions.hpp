#pragma once

#include "psteer/encoder.hpp"

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace psteer::captions {

// One validated scene description. The three semantic fields are lowercase
// and single-spaced from the moment a record exists; source_id is carried
// through verbatim for traceability.
struct CaptionRecord {
    std::string where;
    std::string when;
    std::string weather;
    std::string source_id;

    bool operator==(const CaptionRecord&) const = default;
};

// Canonical term -> variant phrases. Loaded from JSON {canonical:
// [variants...]}; all phrases are normalized at load. Load rejects tables
// where a variant maps to two canonicals or a canonical appears as another
// canonical's variant.
class SynonymTable {
public:
    SynonymTable() = default;
    explicit SynonymTable(std::map<std::string, std::vector<std::string>> mapping);

    // variant phrase -> canonical, or empty map for the identity table.
    const std::map<std::string, std::string>& variant_to_canonical() const {
        return variant_to_canonical_;
    }

private:
    std::map<std::string, std::string> variant_to_canonical_;
};

SynonymTable read_synonyms_file(const std::filesystem::path& path);

struct FilterPolicy {
    std::vector<std::string> banned; // substring match, any field
    std::size_t max_field_len = 64;  // per semantic field, after normalization
};

// Throws ConfigError on an empty banned list or zero max length.
void validate_policy(const FilterPolicy& policy);
FilterPolicy read_policy_file(const std::filesystem::path& path);

// Strict parse of one raw caption byte stream: a single JSON object with
// exactly the keys where/when/weather, all strings. Leading prose, trailing
// garbage, extra keys, missing keys, non-string or effectively-empty values
// all throw. Values are lowercased and whitespace-collapsed.
CaptionRecord parse_caption(const std::string& raw, const std::string& source_id = "");

// Synonym unification of one field: tokens scanned left to right, the
// longest variant phrase starting at each position replaced by its
// canonical, repeated to a fixpoint so composition with itself is the
// identity on its own output.
std::string normalize_field(const std::string& field, const SynonymTable& table);
CaptionRecord normalize(const CaptionRecord& rec, const SynonymTable& table);

struct Rejection {
    CaptionRecord record;
    std::string reason; // "banned:<term>" or "length:<field>"
};

struct FilterResult {
    std::vector<CaptionRecord> kept;
    std::vector<Rejection> rejected;
};

// Partition: a record is rejected iff any semantic field contains a banned
// substring or exceeds the length cap. Input order is preserved in both
// halves; |kept| + |rejected| = |input|.
FilterResult filter(const std::vector<CaptionRecord>& records,
                    const FilterPolicy& policy);

// "an aerial view of {where} {when} in {weather}".
enc::PromptString assemble_prompt(const CaptionRecord& rec);

// Raw caption corpus: JSONL, one {"source_id": ..., "raw": ...} per line,
// where "raw" is the untouched caption-model output that parse_caption
// consumes.
struct RawCaption {
    std::string source_id;
    std::string raw;
};

std::vector<RawCaption> read_raw_captions(const std::filesystem::path& path);

// Kept records as JSONL {"source_id","where","when","weather"}; rejections as
// JSONL with a "reason" and whatever fields were recoverable.
void write_records_file(const std::filesystem::path& path,
                        const std::vector<CaptionRecord>& records);
void write_rejections_file(const std::filesystem::path& path,
                           const std::vector<Rejection>& rejections);

} // namespace psteer::captions
