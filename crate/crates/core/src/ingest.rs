//! MovieLens-1M loading and observation-table construction.
//!
//! The three `::`-separated files are
//!
//! * `users.dat`: `UserID::Gender::Age::Occupation::Zip-code`
//! * `movies.dat`: `MovieID::Title::Genres` (genres `|`-separated, Latin-1)
//! * `ratings.dat`: `UserID::MovieID::Rating::Timestamp`

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::design::{DesignError, Factor, ObservationTable};
use crate::scalar::Real;

/// Age-band codes as they appear in `users.dat`.
pub const AGE_CODES: [u8; 7] = [1, 18, 25, 35, 45, 50, 56];
pub const AGE_LABELS: [&str; 7] = ["Under 18", "18-24", "25-34", "35-44", "45-49", "50-55", "56+"];

/// Occupation labels indexed by the 0-based code in `users.dat`.
pub const OCCUPATION_LABELS: [&str; 21] = [
    "other",
    "academic/educator",
    "artist",
    "clerical/admin",
    "college/grad student",
    "customer service",
    "doctor/health care",
    "executive/managerial",
    "farmer",
    "homemaker",
    "K-12 student",
    "lawyer",
    "programmer",
    "retired",
    "sales/marketing",
    "scientist",
    "self-employed",
    "technician/engineer",
    "tradesman/craftsman",
    "unemployed",
    "writer",
];

pub const GENDER_LABELS: [&str; 2] = ["M", "F"];

pub const AGE: &str = "age";
pub const OCCUPATION: &str = "occupation";
pub const GENDER: &str = "gender";

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{file}:{line}: {message}")]
    Malformed { file: String, line: usize, message: String },
    #[error("no movie titled `{0}`")]
    UnknownTitle(String),
    #[error("no genre `{genre}`; known genres: {known}")]
    UnknownGenre { genre: String, known: String },
    #[error("selection `{0}` matches no ratings")]
    EmptySelection(String),
    #[error("rating refers to unknown user {0}")]
    DanglingUser(u32),
    #[error(transparent)]
    Design(#[from] DesignError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Gender {
    M,
    F,
}

impl Gender {
    pub fn index(self) -> usize {
        match self {
            Gender::M => 0,
            Gender::F => 1,
        }
    }
}

/// One of the seven age bands, stored by its position in [`AGE_CODES`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AgeBand(u8);

impl AgeBand {
    pub fn from_code(code: u8) -> Option<Self> {
        AGE_CODES.iter().position(|&c| c == code).map(|i| Self(i as u8))
    }

    pub fn code(self) -> u8 {
        AGE_CODES[self.0 as usize]
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn label(self) -> &'static str {
        AGE_LABELS[self.0 as usize]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Occupation(u8);

impl Occupation {
    pub fn from_code(code: u8) -> Option<Self> {
        (usize::from(code) < OCCUPATION_LABELS.len()).then_some(Self(code))
    }

    pub fn code(self) -> u8 {
        self.0
    }

    pub fn label(self) -> &'static str {
        OCCUPATION_LABELS[self.0 as usize]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserRecord {
    pub user_id: u32,
    pub gender: Gender,
    pub age: AgeBand,
    pub occupation: Occupation,
    pub zip: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MovieRecord {
    pub movie_id: u32,
    pub title: String,
    pub genres: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RatingRecord {
    pub user_id: u32,
    pub movie_id: u32,
    pub rating: u8,
    pub timestamp: u64,
}

#[derive(Debug, Clone, Default)]
pub struct MovieLens {
    pub users: Vec<UserRecord>,
    pub movies: Vec<MovieRecord>,
    pub ratings: Vec<RatingRecord>,
}

/// Which ratings go into an observation table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Selector {
    MovieId(u32),
    /// Exact title including the year, e.g. `Jurassic Park (1993)`.
    Title(String),
    Genre(String),
}

impl std::fmt::Display for Selector {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Selector::MovieId(id) => write!(f, "movie {id}"),
            Selector::Title(t) => write!(f, "{t}"),
            Selector::Genre(g) => write!(f, "genre {g}"),
        }
    }
}

fn malformed(file: &str, line: usize, message: impl Into<String>) -> IngestError {
    IngestError::Malformed { file: file.to_string(), line, message: message.into() }
}

fn read_latin1(path: &Path) -> Result<String, IngestError> {
    let bytes = fs::read(path).map_err(|source| IngestError::Io { path: path.to_path_buf(), source })?;
    Ok(bytes.iter().map(|&b| char::from(b)).collect())
}

fn fields<'a>(line: &'a str, file: &str, lineno: usize, n: usize) -> Result<Vec<&'a str>, IngestError> {
    let parts: Vec<&str> = line.splitn(n, "::").collect();
    if parts.len() != n {
        return Err(malformed(file, lineno, format!("expected {n} `::`-separated fields, found {}", parts.len())));
    }
    Ok(parts)
}

fn number<N: std::str::FromStr>(s: &str, what: &str, file: &str, line: usize) -> Result<N, IngestError> {
    s.trim().parse().map_err(|_| malformed(file, line, format!("invalid {what} `{s}`")))
}

fn lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().map(|(i, l)| (i + 1, l.trim_end_matches('\r'))).filter(|(_, l)| !l.trim().is_empty())
}

pub fn parse_user(line: &str, lineno: usize) -> Result<UserRecord, IngestError> {
    const FILE: &str = "users.dat";
    let f = fields(line, FILE, lineno, 5)?;
    let gender = match f[1] {
        "M" => Gender::M,
        "F" => Gender::F,
        other => return Err(malformed(FILE, lineno, format!("gender `{other}` is not M or F"))),
    };
    let age_code: u8 = number(f[2], "age", FILE, lineno)?;
    let age = AgeBand::from_code(age_code)
        .ok_or_else(|| malformed(FILE, lineno, format!("age code {age_code} is not one of {AGE_CODES:?}")))?;
    let occ_code: u8 = number(f[3], "occupation", FILE, lineno)?;
    let occupation = Occupation::from_code(occ_code)
        .ok_or_else(|| malformed(FILE, lineno, format!("occupation code {occ_code} outside 0-20")))?;
    Ok(UserRecord { user_id: number(f[0], "user id", FILE, lineno)?, gender, age, occupation, zip: f[4].to_string() })
}

pub fn parse_movie(line: &str, lineno: usize) -> Result<MovieRecord, IngestError> {
    const FILE: &str = "movies.dat";
    // Titles may themselves contain "::"-free punctuation; genres are the last field.
    let first = line.find("::").ok_or_else(|| malformed(FILE, lineno, "missing `::`"))?;
    let last = line.rfind("::").filter(|&p| p > first).ok_or_else(|| malformed(FILE, lineno, "expected 3 fields"))?;
    let genres: Vec<String> =
        line[last + 2..].split('|').map(str::trim).filter(|g| !g.is_empty()).map(String::from).collect();
    if genres.is_empty() {
        return Err(malformed(FILE, lineno, "movie has no genres"));
    }
    Ok(MovieRecord {
        movie_id: number(&line[..first], "movie id", FILE, lineno)?,
        title: line[first + 2..last].to_string(),
        genres,
    })
}

pub fn parse_rating(line: &str, lineno: usize) -> Result<RatingRecord, IngestError> {
    const FILE: &str = "ratings.dat";
    let f = fields(line, FILE, lineno, 4)?;
    let rating: u8 = number(f[2], "rating", FILE, lineno)?;
    if !(1..=5).contains(&rating) {
        return Err(malformed(FILE, lineno, format!("rating {rating} outside 1-5")));
    }
    Ok(RatingRecord {
        user_id: number(f[0], "user id", FILE, lineno)?,
        movie_id: number(f[1], "movie id", FILE, lineno)?,
        rating,
        timestamp: number(f[3], "timestamp", FILE, lineno)?,
    })
}

/// Reads `users.dat`, `movies.dat` and `ratings.dat` from `dir`.
pub fn load_movielens(dir: impl AsRef<Path>) -> Result<MovieLens, IngestError> {
    let dir = dir.as_ref();
    let parse_all = |name: &str| read_latin1(&dir.join(name));

    let users = lines(&parse_all("users.dat")?).map(|(n, l)| parse_user(l, n)).collect::<Result<_, _>>()?;
    let movies = lines(&parse_all("movies.dat")?).map(|(n, l)| parse_movie(l, n)).collect::<Result<_, _>>()?;
    let ratings = lines(&parse_all("ratings.dat")?).map(|(n, l)| parse_rating(l, n)).collect::<Result<_, _>>()?;
    Ok(MovieLens { users, movies, ratings })
}

/// Multi-label expansion: each movie lands in the bucket of every genre it carries.
pub fn expand_genres(movies: &[MovieRecord]) -> BTreeMap<String, BTreeSet<u32>> {
    let mut buckets: BTreeMap<String, BTreeSet<u32>> = BTreeMap::new();
    for m in movies {
        for g in &m.genres {
            buckets.entry(g.clone()).or_default().insert(m.movie_id);
        }
    }
    buckets
}

/// The demographic factors every table carries: age, occupation, gender.
pub fn demographic_factors() -> Vec<Factor> {
    vec![Factor::new(AGE, AGE_LABELS), Factor::new(OCCUPATION, OCCUPATION_LABELS), Factor::new(GENDER, GENDER_LABELS)]
}

/// Resolves a level token for a demographic factor: the label itself
/// (case-insensitive) or the code used in `users.dat`.
pub fn resolve_level(factor: &str, token: &str) -> Option<usize> {
    let token = token.trim();
    let by_label = |labels: &[&str]| labels.iter().position(|l| l.eq_ignore_ascii_case(token));
    match factor {
        AGE => by_label(&AGE_LABELS).or_else(|| token.parse().ok().and_then(AgeBand::from_code).map(AgeBand::index)),
        OCCUPATION => by_label(&OCCUPATION_LABELS)
            .or_else(|| token.parse().ok().and_then(Occupation::from_code).map(|o| usize::from(o.code()))),
        GENDER => by_label(&GENDER_LABELS),
        _ => None,
    }
}

impl MovieLens {
    pub fn movie_by_title(&self, title: &str) -> Option<&MovieRecord> {
        self.movies.iter().find(|m| m.title == title)
    }

    pub fn genres(&self) -> BTreeMap<String, BTreeSet<u32>> {
        expand_genres(&self.movies)
    }

    /// Movie ids selected by `selector`.
    pub fn resolve(&self, selector: &Selector) -> Result<BTreeSet<u32>, IngestError> {
        match selector {
            Selector::MovieId(id) => Ok(BTreeSet::from([*id])),
            Selector::Title(t) => self
                .movie_by_title(t)
                .map(|m| BTreeSet::from([m.movie_id]))
                .ok_or_else(|| IngestError::UnknownTitle(t.clone())),
            Selector::Genre(g) => {
                let mut buckets = self.genres();
                let known = buckets.keys().cloned().collect::<Vec<_>>().join(", ");
                buckets.remove(g).ok_or_else(|| IngestError::UnknownGenre { genre: g.clone(), known })
            }
        }
    }

    /// One row per selected rating, in ratings-file order, with the rater's
    /// age band, occupation and gender as factors.
    pub fn observation_table<T: Real>(&self, selector: &Selector) -> Result<ObservationTable<T>, IngestError> {
        let movies = self.resolve(selector)?;
        build_observation_table(&self.ratings, &self.users, &movies, &selector.to_string())
    }

    /// Number of ratings per genre bucket.
    pub fn genre_rating_counts(&self) -> BTreeMap<String, usize> {
        let mut per_movie: HashMap<u32, usize> = HashMap::new();
        for r in &self.ratings {
            *per_movie.entry(r.movie_id).or_default() += 1;
        }
        self.genres()
            .into_iter()
            .map(|(g, ids)| {
                let n = ids.iter().map(|id| per_movie.get(id).copied().unwrap_or(0)).sum();
                (g, n)
            })
            .collect()
    }
}

pub fn build_observation_table<T: Real>(
    ratings: &[RatingRecord],
    users: &[UserRecord],
    movies: &BTreeSet<u32>,
    description: &str,
) -> Result<ObservationTable<T>, IngestError> {
    let by_id: HashMap<u32, &UserRecord> = users.iter().map(|u| (u.user_id, u)).collect();
    let mut table = ObservationTable::new(demographic_factors())?;
    for r in ratings.iter().filter(|r| movies.contains(&r.movie_id)) {
        let u = by_id.get(&r.user_id).ok_or(IngestError::DanglingUser(r.user_id))?;
        table.push_row(
            T::from_u8(r.rating).unwrap(),
            &[u.age.index(), usize::from(u.occupation.code()), u.gender.index()],
        )?;
    }
    if table.is_empty() {
        return Err(IngestError::EmptySelection(description.to_string()));
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_first_user_line() {
        let u = parse_user("1::F::1::10::48067", 1).unwrap();
        assert_eq!(u.user_id, 1);
        assert_eq!(u.gender, Gender::F);
        assert_eq!(u.age.code(), 1);
        assert_eq!(u.age.label(), "Under 18");
        assert_eq!(u.occupation.code(), 10);
        assert_eq!(u.occupation.label(), "K-12 student");
        assert_eq!(u.zip, "48067");
    }

    #[test]
    fn rating_out_of_range() {
        match parse_rating("1::1193::6::978300760", 7) {
            Err(IngestError::Malformed { file, line, .. }) => assert_eq!((file.as_str(), line), ("ratings.dat", 7)),
            other => panic!("{other:?}"),
        }
        assert!(parse_rating("1::1193::5::978300760", 1).is_ok());
    }

    #[test]
    fn bad_user_codes() {
        assert!(parse_user("2::M::17::16::70072", 1).is_err());
        assert!(parse_user("2::M::56::21::70072", 1).is_err());
        assert!(parse_user("2::X::56::16::70072", 1).is_err());
        assert!(parse_user("2::M::56::16", 1).is_err());
    }

    #[test]
    fn movie_genres_split() {
        let m = parse_movie("1::Toy Story (1995)::Animation|Children's|Comedy", 1).unwrap();
        assert_eq!(m.title, "Toy Story (1995)");
        assert_eq!(m.genres, vec!["Animation", "Children's", "Comedy"]);
    }

    #[test]
    fn genre_expansion() {
        let movies = vec![
            MovieRecord { movie_id: 1, title: "a".into(), genres: vec!["Horror".into(), "Thriller".into()] },
            MovieRecord { movie_id: 2, title: "b".into(), genres: vec!["Horror".into()] },
            MovieRecord { movie_id: 3, title: "c".into(), genres: vec!["Musical".into()] },
        ];
        let b = expand_genres(&movies);
        assert!(b["Horror"].contains(&1) && b["Thriller"].contains(&1));
        assert_eq!(b.values().filter(|s| s.contains(&3)).count(), 1);
        let total: usize = b.values().map(BTreeSet::len).sum();
        assert_eq!(total, movies.iter().map(|m| m.genres.len()).sum::<usize>());
    }

    #[test]
    fn level_tokens() {
        assert_eq!(resolve_level(AGE, "25"), Some(2));
        assert_eq!(resolve_level(AGE, "25-34"), Some(2));
        assert_eq!(resolve_level(OCCUPATION, "Artist"), Some(2));
        assert_eq!(resolve_level(OCCUPATION, "2"), Some(2));
        assert_eq!(resolve_level(GENDER, "f"), Some(1));
        assert_eq!(resolve_level(GENDER, "X"), None);
        assert_eq!(resolve_level("zip", "1"), None);
    }
}
