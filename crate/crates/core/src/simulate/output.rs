use std::io::{self, Write};

use super::ScenarioResult;

fn column_names(prefix: &str, dims: &[usize]) -> Vec<String> {
    let mut out = Vec::new();
    for (i, &d) in dims.iter().enumerate() {
        if d == 1 {
            out.push(format!("{prefix}_{}", i + 1));
        } else {
            out.extend((1..=d).map(|k| format!("{prefix}_{}_{k}", i + 1)));
        }
    }
    out
}

fn num(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes one row per recorded step. Node ids are one-based in the header.
pub fn write_result_csv<W: Write>(result: &ScenarioResult, mut w: W) -> io::Result<()> {
    let (Some(states), Some(controls)) = (result.states.first(), result.controls.first()) else {
        return Ok(());
    };
    let n = states.len();
    let xdims: Vec<usize> = states.iter().map(|x| x.len()).collect();
    let udims: Vec<usize> = controls.iter().map(|u| u.len()).collect();
    let mut header = vec!["t".to_string()];
    header.extend(column_names("x", &xdims));
    header.extend(column_names("u", &udims));
    header.extend((1..=n).map(|i| format!("cbar_{i}")));
    header.push("outer_rounds".into());
    header.push("inner_rounds".into());
    header.extend((1..=n).map(|i| format!("viol_{i}")));
    writeln!(w, "{}", header.join(","))?;

    for k in 0..result.len() {
        let mut row = vec![num(result.times[k])];
        row.extend(result.states[k].iter().flat_map(|x| x.iter().map(|&v| num(v))));
        row.extend(result.controls[k].iter().flat_map(|u| u.iter().map(|&v| num(v))));
        row.extend(result.capabilities[k].iter().map(|&c| num(c)));
        row.push(result.rounds[k].0.to_string());
        row.push(result.rounds[k].1.to_string());
        row.extend(result.violations[k].iter().map(|&v| num(v)));
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

/// Writes the protocol trace. Node ids are one-based.
pub fn write_messages_csv<W: Write>(result: &ScenarioResult, mut w: W) -> io::Result<()> {
    writeln!(w, "t,sub_round,kind,from,to,value")?;
    for m in &result.messages {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            num(m.time),
            m.message.sub_round,
            m.message.kind,
            m.message.from + 1,
            m.message.to + 1,
            num(m.message.value)
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;

    #[test]
    fn header_and_row_layout() {
        let r = ScenarioResult {
            times: vec![0.0],
            states: vec![vec![DVector::from_element(1, 0.5), DVector::from_element(1, 0.25)]],
            controls: vec![vec![DVector::from_element(1, 0.0), DVector::from_element(1, 0.75)]],
            capabilities: vec![vec![0.1, -0.2]],
            rounds: vec![(1, 2)],
            violations: vec![vec![0.0, -0.05]],
            filter_relaxed: vec![vec![false, false]],
            ..Default::default()
        };
        let mut buf = Vec::new();
        write_result_csv(&r, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "t,x_1,x_2,u_1,u_2,cbar_1,cbar_2,outer_rounds,inner_rounds,viol_1,viol_2"
        );
        let row: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(row.len(), 11);
        assert_eq!(row[7], "1");
        assert_eq!(row[2].parse::<f64>().unwrap(), 0.25);
    }
}
